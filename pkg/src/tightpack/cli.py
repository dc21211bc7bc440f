"""Command-line driver: prune -> (subword) -> anneal + pack -> simulate -> render.

Exit codes: 0 ok, 1 internal error, 2 validation error, 3 verification
mismatch.  Options may also come from a ``key = value`` config file given
with ``--config``; command-line flags take precedence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from tightpack.anneal import AnnealConfig, anneal_search
from tightpack.pack import (REPORT_SCHEMA, ArrayGeometry, dump_json, load_packed, pack,
                            packed_to_json, save_packed)
from tightpack.prune import (SUPPORTED_FORMATS, InvalidRateError, SubwordFormat,
                             choose_subword_format, format_table_json, magnitude_prune,
                             prune_schedule, subword_prune)
from tightpack.simarray import (dense_reference, estimate_cycles, schedule_tiles,
                                simulate_matmul, write_layer_csv)
from tightpack.tensorio import ParseError, load_matrix, render_density, save_matrix

log = logging.getLogger("tightpack")

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID, EXIT_MISMATCH = 0, 1, 2, 3


class ValidationError(Exception):
    pass


class VerificationError(Exception):
    pass


def _rate(text: str) -> float:
    return float(text)


def _add_geometry(p):
    g = p.add_argument_group("array geometry")
    g.add_argument("--rows", type=int, default=32, help="array rows / section height (H)")
    g.add_argument("--cols", type=int, default=32, help="array columns / tile width (W)")
    g.add_argument("--group-max", type=int, default=16, help="max original columns per group (G)")
    g.add_argument("--subarray-cols", type=int, default=8)
    g.add_argument("--macs-per-node", type=int, default=4)
    g.add_argument("--act-bits", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tightpack", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key = value file supplying option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="magnitude-prune a quantized matrix")
    p.add_argument("input")
    p.add_argument("output")
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--rate", type=_rate)
    grp.add_argument("--schedule", nargs=2, metavar=("EPOCHS", "RATE"))

    p = sub.add_parser("compress", help="permute and pack one or more matrices")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output", required=True,
                   help="packed JSON path, or a directory when several inputs are given")
    p.add_argument("--report", help="report JSON path (default: <output stem>.report.json)")
    p.add_argument("--mode", choices=("weight", "subword"), default="weight")
    p.add_argument("--delta-max", type=float, default=0.25)
    p.add_argument("--subword-format", default="auto",
                   choices=["auto"] + [f.label for f in SUPPORTED_FORMATS])
    _add_geometry(p)
    a = p.add_argument_group("annealing")
    a.add_argument("--t-init", type=float, default=None)
    a.add_argument("--t-end", type=float, default=1e-5)
    a.add_argument("--cooling", type=float, default=0.01)
    a.add_argument("--iters", type=int, default=15)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--no-anneal", action="store_true", help="greedy packing without permutation")
    a.add_argument("--trace", help="write a JSON-lines annealing trace here")
    p.add_argument("--render", help="also write the packed density map (PGM)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers across input matrices")

    p = sub.add_parser("simulate", help="run a packed matrix on the array model")
    p.add_argument("packed")
    p.add_argument("inputs", help="activation matrix (TCM1 or CSV), one row per original column")
    p.add_argument("-o", "--output", required=True, help="output CSV of 32-bit results")
    p.add_argument("--report", help="cycle report JSON (default: <output stem>.cycles.json)")
    p.add_argument("--check", action="store_true", help="compare against the dense product")
    p.add_argument("--fold", action="store_true", help="fold section tails into shared tiles")
    p.add_argument("--weight-bus-words", type=int, default=32)
    p.add_argument("--fold-penalty", type=int, default=0)
    p.add_argument("--layer-csv", help="write layer,cycles CSV")

    p = sub.add_parser("render", help="write a density bitmap (PGM)")
    p.add_argument("input", help="matrix file or packed JSON")
    p.add_argument("output")
    return parser


def load_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, config: dict[str, str]) -> None:
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sp in subparsers.choices.values():
        defaults = {}
        for action in sp._actions:
            if action.dest in config:
                raw = config[action.dest]
                if isinstance(action, argparse._StoreTrueAction):
                    defaults[action.dest] = raw.lower() in ("1", "true", "yes", "on")
                else:
                    defaults[action.dest] = action.type(raw) if action.type else raw
        sp.set_defaults(**defaults)


def geometry_from(args) -> ArrayGeometry:
    try:
        return ArrayGeometry(args.rows, args.cols, args.group_max, args.subarray_cols,
                             args.macs_per_node, args.act_bits)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


# ---------------------------------------------------------------------------


def cmd_prune(args) -> int:
    m = load_matrix(args.input)
    if args.rate is not None:
        if not 0.0 <= args.rate <= 1.0:
            raise ValidationError(f"--rate must be in [0, 1], got {args.rate}")
        out = magnitude_prune(m, args.rate)
    else:
        try:
            sched = prune_schedule(int(args.schedule[0]), float(args.schedule[1]))
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        out = m
        for _, rate in sched:
            out = magnitude_prune(out, rate)
    save_matrix(out, args.output, "csv" if Path(args.output).suffix.lower() == ".csv" else "tcm")
    st = out.stats()
    log.info("pruned %s: %d nonzeros, density %.4f", args.input, st.nonzeros, st.density)
    return EXIT_OK


def _compress_one(path: str, out_path: Path, report_path: Path, opts: dict) -> dict:
    geom = ArrayGeometry(**opts["geometry"])
    m = load_matrix(path)
    report: dict = {"schema": REPORT_SCHEMA, "kind": "compress", "input": Path(path).name,
                    "name": m.name, "shape": list(m.shape), "mode": opts["mode"],
                    "geometry": geom.as_dict()}
    target = m
    if opts["mode"] == "subword":
        fmt, table = choose_subword_format(m, opts["delta_max"])
        if opts["subword_format"] != "auto":
            fmt = SubwordFormat.from_label(opts["subword_format"])
        target = subword_prune(m, fmt, opts["delta_max"])
        report["subword"] = {"format": fmt.label, "h_bits": fmt.h_bits, "l_bits": fmt.l_bits,
                             "delta_max": opts["delta_max"], "table": format_table_json(table),
                             "counts": target.counts()}
    if opts["no_anneal"]:
        packed = pack(target, geom)
    else:
        cfg = AnnealConfig(**opts["anneal"])
        trace = open(opts["trace"], "w") if opts["trace"] else None
        try:
            result = anneal_search(target, geom, cfg=cfg, trace=trace)
        finally:
            if trace is not None:
                trace.close()
        packed = result.packed
        report["anneal"] = {"seed": cfg.seed, "cooling": cfg.cooling, "iters": cfg.iters_per_temp,
                            "t_end": cfg.t_end, **result.as_json()}
    baseline = pack(target, geom) if not opts["no_anneal"] else packed
    report["compression"] = packed.report.as_json()
    report["baseline_compression_rate"] = baseline.report.compression_rate
    save_packed(packed, out_path)
    report_path.write_text(dump_json(report))
    if opts["render"]:
        render_density(packed, opts["render"])
    return report


def cmd_compress(args) -> int:
    geom = geometry_from(args)
    try:
        AnnealConfig(args.t_init, args.t_end, args.cooling, args.iters, args.seed)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if args.mode == "subword" and not 0.0 < args.delta_max < 1.0:
        raise ValidationError("--delta-max must be in (0, 1)")
    for path in args.inputs:
        if not Path(path).is_file():
            raise ValidationError(f"no such input: {path}")
    opts = {"geometry": geom.as_dict(), "mode": args.mode, "delta_max": args.delta_max,
            "subword_format": args.subword_format, "no_anneal": args.no_anneal,
            "anneal": {"t_init": args.t_init, "t_end": args.t_end, "cooling": args.cooling,
                       "iters_per_temp": args.iters, "seed": args.seed},
            "trace": args.trace, "render": args.render}
    output = Path(args.output)
    jobs = []
    if len(args.inputs) == 1:
        report = Path(args.report) if args.report else output.with_name(
            output.name.removesuffix(".json").removesuffix(".packed") + ".report.json")
        jobs.append((args.inputs[0], output, report))
    else:
        if args.trace or args.render:
            raise ValidationError("--trace/--render need a single input")
        output.mkdir(parents=True, exist_ok=True)
        for path in args.inputs:
            stem = Path(path).stem
            jobs.append((path, output / f"{stem}.packed.json", output / f"{stem}.report.json"))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_compress_one, str(i), o, r, opts) for i, o, r in jobs]
            reports = [f.result() for f in futures]
    else:
        reports = [_compress_one(str(i), o, r, opts) for i, o, r in jobs]
    for rep in reports:
        c = rep["compression"]
        log.info("%s: rate %.2fx, density %.3f, %d tiles", rep["name"], c["compression_rate"],
                 c["density"], c["tile_count"])
    return EXIT_OK


def cmd_simulate(args) -> int:
    for path in (args.packed, args.inputs):
        if not Path(path).is_file():
            raise ValidationError(f"no such file: {path}")
    pm = load_packed(args.packed)
    x = load_matrix(args.inputs).values.astype(np.int64)
    if x.shape[0] != pm.shape[1]:
        raise ValidationError(f"inputs have {x.shape[0]} rows, packed matrix has {pm.shape[1]} columns")
    ts = schedule_tiles(pm, folding=args.fold)
    out = simulate_matmul(pm, x, schedule=ts)
    np.savetxt(args.output, out, fmt="%d", delimiter=",")
    rep = estimate_cycles(ts, x.shape[1], pm=pm, weight_bus_words=args.weight_bus_words,
                          fold_penalty=args.fold_penalty)
    doc = rep.as_json()
    doc["name"] = pm.name
    doc["folding"] = args.fold
    status = EXIT_OK
    if args.check:
        ref = dense_reference(pm, x)
        mismatches = int(np.count_nonzero(ref != out))
        doc["check"] = {"mismatches": mismatches}
        if mismatches:
            status = EXIT_MISMATCH
    output = Path(args.output)
    report = Path(args.report) if args.report else output.with_name(output.stem + ".cycles.json")
    report.write_text(dump_json(doc))
    if args.layer_csv:
        write_layer_csv(args.layer_csv, [pm.name or Path(args.packed).stem], [rep])
    if status == EXIT_MISMATCH:
        raise VerificationError(f"{doc['check']['mismatches']} output mismatches")
    return status


def cmd_render(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise ValidationError(f"no such file: {path}")
    if path.suffix.lower() == ".json":
        render_density(load_packed(path), args.output)
    else:
        render_density(load_matrix(path), args.output)
    return EXIT_OK


COMMANDS = {"prune": cmd_prune, "compress": cmd_compress, "simulate": cmd_simulate,
            "render": cmd_render}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    try:
        if known.config:
            _apply_config(parser, load_config(known.config))
    except (OSError, ValidationError, ValueError) as exc:
        print(f"tightpack: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # usage errors exit 2, --help exits 0
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except VerificationError as exc:
        print(f"tightpack: verification failed: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ValidationError, ParseError, InvalidRateError, FileNotFoundError) as exc:
        print(f"tightpack: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"tightpack: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
