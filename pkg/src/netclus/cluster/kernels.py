"""Nearest-neighbor scan kernels for the merge rounds.

Two interchangeable implementations of the same group-local scan: a
numba-jitted loop and a pure-numpy path. ``NETCLUS_NUMBA=0`` forces the
numpy path; otherwise numba is used when importable. Both are exposed so
the benchmark suite can compare them. The jitted loop is deliberately
single-threaded: rows are cheap and thread sync costs more than it buys
at these sizes.

``cent``/``sizes`` cover the full id space; ``order``/``starts`` describe
candidate groups (CSR of row ids, ascending within a group). A single
group over all active ids is the exact scan. Ties on the merge metric
resolve to the smallest id because groups are scanned in ascending order
with a strict comparison.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_enabled() -> bool:
    flag = os.environ.get("NETCLUS_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


def nearest_in_groups_numpy(
    cent: np.ndarray, sizes: np.ndarray, order: np.ndarray, starts: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster nearest neighbor within its group, vectorized per group."""
    m = cent.shape[0]
    best_idx = np.full(m, -1, dtype=np.int64)
    best_d = np.full(m, np.inf, dtype=np.float64)
    for g in range(starts.shape[0] - 1):
        members = order[starts[g] : starts[g + 1]]
        if members.shape[0] < 2:
            continue
        u = cent[members]
        sz = sizes[members]
        cd = 1.0 - u @ u.T
        d = (sz[:, None] * sz[None, :]) * cd * cd
        np.fill_diagonal(d, np.inf)
        local_best = np.argmin(d, axis=1)  # first occurrence = smallest index
        best_idx[members] = members[local_best]
        best_d[members] = d[np.arange(members.shape[0]), local_best]
    return best_idx, best_d


def _make_numba_impl():
    import numba

    @numba.njit(fastmath=True, cache=True)
    def impl(cent, sizes, order, starts):  # pragma: no cover - jitted
        dim = cent.shape[1]
        m = cent.shape[0]
        best_idx = np.full(m, -1, dtype=np.int64)
        best_d = np.full(m, np.inf, dtype=np.float64)
        for g in range(starts.shape[0] - 1):
            lo = starts[g]
            hi = starts[g + 1]
            b = hi - lo
            if b < 2:
                continue
            if b <= 64:
                # small group: scan through the index indirection directly
                for a in range(b):
                    i = order[lo + a]
                    bi = -1
                    bd = np.inf
                    for c in range(b):
                        j = order[lo + c]
                        if j == i:
                            continue
                        s = 0.0
                        for k in range(dim):
                            s += cent[i, k] * cent[j, k]
                        cd = 1.0 - s
                        d = sizes[i] * sizes[j] * cd * cd
                        if d < bd:
                            bd = d
                            bi = j
                    best_idx[i] = bi
                    best_d[i] = bd
            else:
                # big group: contiguous local copy so the dots vectorize
                block = np.empty((b, dim), dtype=np.float64)
                sz = np.empty(b, dtype=np.float64)
                for a in range(b):
                    row = order[lo + a]
                    sz[a] = sizes[row]
                    for k in range(dim):
                        block[a, k] = cent[row, k]
                for a in range(b):
                    bi = -1
                    bd = np.inf
                    for c in range(b):
                        if c == a:
                            continue
                        s = 0.0
                        for k in range(dim):
                            s += block[a, k] * block[c, k]
                        cd = 1.0 - s
                        d = sz[a] * sz[c] * cd * cd
                        if d < bd:
                            bd = d
                            bi = c
                    best_idx[order[lo + a]] = order[lo + bi]
                    best_d[order[lo + a]] = bd
        return best_idx, best_d

    return impl


try:
    nearest_in_groups_numba = _make_numba_impl()
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nearest_in_groups_numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _numba_enabled()
BACKEND = "numba" if USE_NUMBA else "numpy"


def nearest_in_groups(
    cent: np.ndarray, sizes: np.ndarray, order: np.ndarray, starts: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    if USE_NUMBA:
        return nearest_in_groups_numba(cent, sizes, order, starts)
    return nearest_in_groups_numpy(cent, sizes, order, starts)


def warmup() -> None:
    """Trigger JIT compilation so timed runs see warm kernels."""
    cent = np.eye(4, dtype=np.float64)
    sizes = np.ones(4, dtype=np.float64)
    order = np.arange(4, dtype=np.int64)
    starts = np.array([0, 4], dtype=np.int64)
    nearest_in_groups(cent, sizes, order, starts)
