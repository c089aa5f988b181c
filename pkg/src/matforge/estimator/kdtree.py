"""KD-tree over key-diffuse pixel colors.

Nearest-neighbor queries return the exact squared-Euclidean argmin, with
ties broken toward the smallest linear pixel index. Duplicate key colors are
collapsed before the build (keeping their smallest index), which keeps the
tie rule exact without forcing the search through runs of identical points.
"""

from __future__ import annotations

import numba
import numpy as np

LEAF_SIZE = 16


def _lexsort_unique(points: np.ndarray):
    n = len(points)
    order = np.lexsort(points.T[::-1])  # stable: equal rows keep index order
    srt = points[order]
    new = np.empty(n, dtype=bool)
    new[0] = True
    np.any(srt[1:] != srt[:-1], axis=1, out=new[1:])
    starts = np.flatnonzero(new)
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.cumsum(new) - 1
    return srt[starts], order[starts], inverse


_HASH_MULT = np.array([0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9],
                      dtype=np.uint64)


def unique_rows(points: np.ndarray):
    """Distinct rows, the smallest index of each, and the inverse map.

    Rows are grouped by a 64-bit hash of their bit patterns; a hash collision
    between unequal rows falls back to an exact lexicographic sort.
    """
    points = np.ascontiguousarray(points, dtype=np.float64) + 0.0  # folds -0.0 into 0.0
    n = len(points)
    if n == 0:
        return points, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    bits = points.view(np.uint64)
    h = np.zeros(n, dtype=np.uint64)
    for k in range(points.shape[1]):
        h ^= (bits[:, k] + np.uint64(k)) * _HASH_MULT[k % 3]
        h = (h << np.uint64(29)) | (h >> np.uint64(35))
    order = np.argsort(h, kind="stable")
    hs = h[order]
    new = np.empty(n, dtype=bool)
    new[0] = True
    np.not_equal(hs[1:], hs[:-1], out=new[1:])
    group = np.cumsum(new) - 1
    starts = np.flatnonzero(new)
    srt = points[order]
    if not np.array_equal(srt, srt[starts][group]):
        return _lexsort_unique(points)
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = group
    return srt[starts], order[starts], inverse


@numba.njit(cache=True)
def _select(perm, pts, dim, lo, hi, k):
    """Partially order perm[lo:hi] by pts[:, dim] so rank k sits at position k."""
    while hi - lo > 1:
        mid = (lo + hi - 1) // 2
        a, b, c = perm[lo], perm[mid], perm[hi - 1]
        va, vb, vc = pts[a, dim], pts[b, dim], pts[c, dim]
        if (va <= vb) == (vb <= vc):
            pivot = vb
        elif (vb <= va) == (va <= vc):
            pivot = va
        else:
            pivot = vc
        # three-way partition around pivot
        lt, i, gt = lo, lo, hi - 1
        while i <= gt:
            v = pts[perm[i], dim]
            if v < pivot:
                tmp = perm[lt]
                perm[lt] = perm[i]
                perm[i] = tmp
                lt += 1
                i += 1
            elif v > pivot:
                tmp = perm[gt]
                perm[gt] = perm[i]
                perm[i] = tmp
                gt -= 1
            else:
                i += 1
        if k < lt:
            hi = lt
        elif k > gt:
            lo = gt + 1
        else:
            return


@numba.njit(cache=True)
def _build(pts, leaf_size):
    n = pts.shape[0]
    ndim = pts.shape[1]
    cap = 2 * (n // max(leaf_size // 2, 1)) + 3
    lo_a = np.empty(cap, np.int64)
    hi_a = np.empty(cap, np.int64)
    dim_a = np.full(cap, -1, np.int64)
    split_a = np.zeros(cap, np.float64)
    left_a = np.full(cap, -1, np.int64)
    right_a = np.full(cap, -1, np.int64)
    perm = np.arange(n)
    lo_a[0] = 0
    hi_a[0] = n
    count = 1
    stack = np.empty(cap, np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        lo = lo_a[node]
        hi = hi_a[node]
        if hi - lo <= leaf_size:
            continue
        best_dim = 0
        best_spread = -1.0
        for d in range(ndim):
            mn = np.inf
            mx = -np.inf
            for i in range(lo, hi):
                v = pts[perm[i], d]
                if v < mn:
                    mn = v
                if v > mx:
                    mx = v
            if mx - mn > best_spread:
                best_spread = mx - mn
                best_dim = d
        if best_spread <= 0.0:
            continue
        mid = (lo + hi) // 2
        _select(perm, pts, best_dim, lo, hi, mid)
        dim_a[node] = best_dim
        split_a[node] = pts[perm[mid], best_dim]
        left_a[node] = count
        lo_a[count] = lo
        hi_a[count] = mid
        right_a[node] = count + 1
        lo_a[count + 1] = mid
        hi_a[count + 1] = hi
        stack[sp] = count
        stack[sp + 1] = count + 1
        sp += 2
        count += 2
    return perm, lo_a[:count], hi_a[:count], dim_a[:count], split_a[:count], \
        left_a[:count], right_a[:count]


@numba.njit(cache=True)
def _query(pts, ids, perm, lo_a, hi_a, dim_a, split_a, left_a, right_a, queries,
           out_idx, out_dist):
    ndim = pts.shape[1]
    stack_node = np.empty(256, np.int64)
    stack_bound = np.empty(256, np.float64)
    for q in range(queries.shape[0]):
        best = np.inf
        best_id = np.int64(-1)
        sp = 0
        stack_node[0] = 0
        stack_bound[0] = 0.0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack_node[sp]
            bound = stack_bound[sp]
            if bound > best:
                continue
            d = dim_a[node]
            if d < 0:
                for i in range(lo_a[node], hi_a[node]):
                    p = perm[i]
                    dist = 0.0
                    for k in range(ndim):
                        t = queries[q, k] - pts[p, k]
                        dist += t * t
                    if dist < best or (dist == best and ids[p] < best_id):
                        best = dist
                        best_id = ids[p]
                continue
            diff = queries[q, d] - split_a[node]
            if diff < 0.0:
                near = left_a[node]
                far = right_a[node]
            else:
                near = right_a[node]
                far = left_a[node]
            # far first so the near child is popped next
            stack_node[sp] = far
            stack_bound[sp] = max(bound, diff * diff)
            stack_node[sp + 1] = near
            stack_bound[sp + 1] = bound
            sp += 2
        out_idx[q] = best_id
        out_dist[q] = best


def morton_codes(points: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                 bits: int = 10) -> np.ndarray:
    """Interleaved-bit (Z-order) codes of points quantized inside [lower, upper]."""
    span = np.where(upper > lower, upper - lower, 1.0)
    q = np.clip((points - lower) / span * ((1 << bits) - 1), 0, (1 << bits) - 1)
    q = q.astype(np.uint64)
    code = np.zeros(len(points), dtype=np.uint64)
    ndim = points.shape[1]
    for b in range(bits):
        for k in range(ndim):
            code |= ((q[:, k] >> np.uint64(b)) & np.uint64(1)) << np.uint64(b * ndim + k)
    return code


class PixelIndex:
    """KD-tree over an (n, 3) array of key colors (or an (H, W, 3) image).

    ``query`` returns linear pixel indices into the original array.
    """

    def __init__(self, colors: np.ndarray, leaf_size: int = LEAF_SIZE):
        colors = np.asarray(colors, dtype=np.float64)
        if colors.ndim == 3:
            colors = colors.reshape(-1, colors.shape[2])
        if colors.ndim != 2 or len(colors) == 0:
            raise ValueError("PixelIndex needs a non-empty (n, d) color array")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.n_pixels = len(colors)
        self.leaf_size = leaf_size
        self.points, self.ids, _ = unique_rows(colors)
        self._lower = self.points.min(axis=0)
        self._upper = self.points.max(axis=0)
        order = np.argsort(morton_codes(self.points, self._lower, self._upper), kind="stable")
        self.points = np.ascontiguousarray(self.points[order])
        self.ids = self.ids[order]
        (self._perm, self._lo, self._hi, self._dim, self._split,
         self._left, self._right) = _build(self.points, leaf_size)

    @property
    def n_nodes(self) -> int:
        return len(self._lo)

    def query(self, queries: np.ndarray, return_distance: bool = False):
        queries = np.asarray(queries, dtype=np.float64)
        single = queries.ndim == 1
        queries = np.atleast_2d(queries)
        if queries.shape[1] != self.points.shape[1]:
            raise ValueError("query dimensionality does not match the index")
        uq, _, inverse = unique_rows(queries)
        # spatially coherent query order keeps tree nodes in cache
        order = np.argsort(morton_codes(uq, self._lower, self._upper), kind="stable")
        idx = np.empty(len(uq), dtype=np.int64)
        dist = np.empty(len(uq), dtype=np.float64)
        _query(self.points, self.ids, self._perm, self._lo, self._hi, self._dim, self._split,
               self._left, self._right, np.ascontiguousarray(uq[order]), idx, dist)
        back = np.empty_like(order)
        back[order] = np.arange(len(order))
        idx, dist = idx[back][inverse], dist[back][inverse]
        if single:
            idx, dist = idx[0], dist[0]
        return (idx, dist) if return_distance else idx

