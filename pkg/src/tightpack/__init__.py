"""Sparse weight-matrix compression for systolic arrays.

Pipeline: magnitude pruning and optional subword pruning, simulated-annealing
row/column permutation with greedy conflict-free column packing, and a
functional systolic-array model with a cycle proxy.
"""

from tightpack.anneal import AnnealConfig, EnergyDelta, PermutationState, anneal, delta_energy
from tightpack.pack import (ArrayGeometry, ColumnGroup, CompressionReport, PackedMatrix,
                            compression_report, pack, pack_matrix, pack_section,
                            partition_sections, unpack)
from tightpack.prune import (SubwordFormat, SubwordMatrix, choose_subword_format,
                             magnitude_prune, prune_schedule, quantize8, subword_prune)
from tightpack.simarray import estimate_cycles, schedule_tiles, simulate_matmul
from tightpack.tensorio import WeightMatrix, load_matrix, render_density, save_matrix

__version__ = "0.1.0"
