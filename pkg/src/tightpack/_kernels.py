"""Compiled inner loops for greedy column packing.

A column (or group) of a row section is two row bitmasks, one per slot
(``lo`` for the L slot, ``hi`` for the H slot), stored as ``(n, words)``
``uint64`` arrays.  Weight-level cells set both bits, so the same kernel
serves both packing modes.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def popcount64(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)


@njit(cache=True)
def slot_weights(lo, hi):
    n, nw = lo.shape
    out = np.zeros(n, np.int64)
    for i in range(n):
        s = 0
        for k in range(nw):
            s += popcount64(lo[i, k]) + popcount64(hi[i, k])
        out[i] = s
    return out


@njit(cache=True)
def greedy_pack(lo, hi, weight, size, group_max, height):
    """Greedy densest-merge packing of one row section.

    The current group repeatedly absorbs the later group with the most
    occupied slots among those that fit (lowest position on ties).
    Candidates are visited in (weight desc, position asc) order, so the
    first compatible one is the answer; ``height`` bounds the free slots
    (two per row), which lets the scan skip candidates too heavy to fit.

    Returns ``(n_groups, owner, rank)``: ``owner[j]`` is the working-list
    position of the group that absorbed position ``j`` (itself for group
    heads) and ``rank[j]`` the order in which it was absorbed (0 for heads).
    """
    n, nw = lo.shape
    owner = np.full(n, -1, np.int64)
    rank = np.zeros(n, np.int64)
    cur_lo = np.zeros(nw, np.uint64)
    cur_hi = np.zeros(nw, np.uint64)
    cap = 2 * height
    order = np.argsort(-weight, kind="mergesort")
    # first[w]: first index into order whose weight is <= w
    first = np.zeros(cap + 2, np.int64)
    p = 0
    for w in range(cap, -1, -1):
        while p < n and weight[order[p]] > w:
            p += 1
        first[w] = p
    n_groups = 0
    for i in range(n):
        if owner[i] >= 0:
            continue
        owner[i] = i
        for k in range(nw):
            cur_lo[k] = lo[i, k]
            cur_hi[k] = hi[i, k]
        cur_size = size[i]
        free = cap - weight[i]
        if free < 0:
            free = 0
        merged = 0
        while cur_size < group_max:
            best = -1
            for q in range(first[free], n):
                j = order[q]
                if j <= i or owner[j] >= 0 or cur_size + size[j] > group_max:
                    continue
                ok = True
                for k in range(nw):
                    if (cur_lo[k] & lo[j, k]) != 0 or (cur_hi[k] & hi[j, k]) != 0:
                        ok = False
                        break
                if ok:
                    best = j
                    break
            if best < 0:
                break
            merged += 1
            owner[best] = i
            rank[best] = merged
            for k in range(nw):
                cur_lo[k] |= lo[best, k]
                cur_hi[k] |= hi[best, k]
            cur_size += size[best]
            free -= weight[best]
        n_groups += 1
    return n_groups, owner, rank


@njit(cache=True)
def greedy_width(lo, hi, weight, size, group_max, height):
    n_groups, _, _ = greedy_pack(lo, hi, weight, size, group_max, height)
    return n_groups


@njit(cache=True)
def column_masks(occ, rows, cols, nw):
    """Bitmasks of ``occ[rows][:, cols]``; ``rows`` entries < 0 are padding."""
    n = cols.shape[0]
    out = np.zeros((n, nw), np.uint64)
    for p in range(rows.shape[0]):
        r = rows[p]
        if r < 0:
            continue
        word = p // 64
        bit = np.uint64(1) << np.uint64(p % 64)
        for j in range(n):
            if occ[r, cols[j]]:
                out[j, word] |= bit
    return out
