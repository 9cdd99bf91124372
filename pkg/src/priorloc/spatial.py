"""kd-tree spatial indices.

:class:`KDTree` is a static, balanced tree built once over a point snapshot.
:class:`IncrementalIndex` adds batched insertion on top of it: new points go
into a small buffer tree that is rebuilt per batch, and the whole index is
rebalanced once the buffer grows past ``rebuild_ratio`` of the total.

All queries order results by (squared distance, point id), so results are
identical to a brute-force scan with the same tie rule.  Concurrent readers of
a built ``KDTree`` are fine; an ``IncrementalIndex`` must not be queried while
an ``insert`` is running.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

DEFAULT_LEAF_SIZE = 16
DEFAULT_REBUILD_RATIO = 0.3
_STACK = 256


@njit(cache=True, inline="always")
def _key_less(points, d, a, b):
    va = points[a, d]
    vb = points[b, d]
    return va < vb or (va == vb and a < b)


@njit(cache=True)
def _select(perm, lo, hi, k, points, d, counter):
    # Lomuto quickselect; keys are unique thanks to the index tie-break.
    while hi - lo > 1:
        mid = (lo + hi) // 2
        a, b, c = perm[lo], perm[mid], perm[hi - 1]
        counter[0] += 3
        if _key_less(points, d, a, b):
            if _key_less(points, d, b, c):
                p = mid
            elif _key_less(points, d, a, c):
                p = hi - 1
            else:
                p = lo
        else:
            if _key_less(points, d, a, c):
                p = lo
            elif _key_less(points, d, b, c):
                p = hi - 1
            else:
                p = mid
        tmp = perm[p]
        perm[p] = perm[hi - 1]
        perm[hi - 1] = tmp
        pivot = perm[hi - 1]
        store = lo
        for i in range(lo, hi - 1):
            counter[0] += 1
            if _key_less(points, d, perm[i], pivot):
                tmp = perm[i]
                perm[i] = perm[store]
                perm[store] = tmp
                store += 1
        tmp = perm[store]
        perm[store] = perm[hi - 1]
        perm[hi - 1] = tmp
        if k == store:
            return
        elif k < store:
            hi = store
        else:
            lo = store + 1


@njit(cache=True)
def _build(points, leaf_size):
    n = points.shape[0]
    perm = np.arange(n)
    min_leaf = max(1, (leaf_size + 1) // 2)
    max_nodes = 2 * (n // min_leaf + 1) + 1
    start = np.empty(max_nodes, np.int64)
    end = np.empty(max_nodes, np.int64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    lo = np.empty((max_nodes, 3))
    hi = np.empty((max_nodes, 3))
    counter = np.zeros(1, np.int64)
    if n == 0:
        return perm, start[:0], end[:0], left[:0], right[:0], lo[:0], hi[:0], 0
    stack = np.empty(_STACK, np.int64)
    start[0] = 0
    end[0] = n
    count = 1
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = end[node]
        for d in range(3):
            lo[node, d] = np.inf
            hi[node, d] = -np.inf
        for i in range(s, e):
            p = perm[i]
            for d in range(3):
                v = points[p, d]
                if v < lo[node, d]:
                    lo[node, d] = v
                if v > hi[node, d]:
                    hi[node, d] = v
        if e - s <= leaf_size:
            continue
        dim = 0
        best = hi[node, 0] - lo[node, 0]
        for d in range(1, 3):
            ext = hi[node, d] - lo[node, d]
            if ext > best:
                best = ext
                dim = d
        m = (s + e) // 2
        _select(perm, s, e, m, points, dim, counter)
        lc = count
        rc = count + 1
        count += 2
        start[lc] = s
        end[lc] = m
        start[rc] = m
        end[rc] = e
        left[node] = lc
        right[node] = rc
        stack[sp] = rc
        sp += 1
        stack[sp] = lc
        sp += 1
    return (
        perm,
        start[:count].copy(),
        end[:count].copy(),
        left[:count].copy(),
        right[:count].copy(),
        lo[:count].copy(),
        hi[:count].copy(),
        counter[0],
    )


@njit(cache=True, inline="always")
def _box_dist2(q, lo, hi, node):
    acc = 0.0
    for d in range(3):
        v = q[d]
        if v < lo[node, d]:
            t = lo[node, d] - v
            acc += t * t
        elif v > hi[node, d]:
            t = v - hi[node, d]
            acc += t * t
    return acc


@njit(cache=True, inline="always")
def _dist2(points, p, q):
    dx = points[p, 0] - q[0]
    dy = points[p, 1] - q[1]
    dz = points[p, 2] - q[2]
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _knn_one(points, perm, start, end, left, right, lo, hi, q, k, out_i, out_d, id_offset):
    for j in range(k):
        out_i[j] = -1
        out_d[j] = np.inf
    if start.shape[0] == 0:
        return 0
    found = 0
    stack = np.empty(_STACK, np.int64)
    bounds = np.empty(_STACK)
    sp = 0
    stack[0] = 0
    bounds[0] = _box_dist2(q, lo, hi, 0)
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if found == k and bounds[sp] > out_d[k - 1]:
            continue
        if left[node] < 0:
            for i in range(start[node], end[node]):
                p = perm[i]
                d2 = _dist2(points, p, q)
                pid = p + id_offset
                if found == k:
                    wd = out_d[k - 1]
                    if d2 > wd or (d2 == wd and pid > out_i[k - 1]):
                        continue
                    j = k - 1
                else:
                    j = found
                    found += 1
                while j > 0 and (out_d[j - 1] > d2 or (out_d[j - 1] == d2 and out_i[j - 1] > pid)):
                    out_d[j] = out_d[j - 1]
                    out_i[j] = out_i[j - 1]
                    j -= 1
                out_d[j] = d2
                out_i[j] = pid
        else:
            a = left[node]
            b = right[node]
            da = _box_dist2(q, lo, hi, a)
            db = _box_dist2(q, lo, hi, b)
            if da <= db:
                near, far, dn, df = a, b, da, db
            else:
                near, far, dn, df = b, a, db, da
            stack[sp] = far
            bounds[sp] = df
            sp += 1
            stack[sp] = near
            bounds[sp] = dn
            sp += 1
    return found


@njit(cache=True, parallel=True)
def _knn_batch(points, perm, start, end, left, right, lo, hi, queries, k, id_offset):
    m = queries.shape[0]
    out_i = np.empty((m, k), np.int64)
    out_d = np.empty((m, k))
    for j in prange(m):
        _knn_one(points, perm, start, end, left, right, lo, hi, queries[j], k,
                 out_i[j], out_d[j], id_offset)
    return out_i, out_d


@njit(cache=True)
def _radius_visit(points, perm, start, end, left, right, lo, hi, q, r2, out_i, out_d, id_offset):
    # Writes into out_* when they are large enough; always returns the match count.
    if start.shape[0] == 0:
        return 0
    n = 0
    cap = out_i.shape[0]
    stack = np.empty(_STACK, np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_dist2(q, lo, hi, node) > r2:
            continue
        if left[node] < 0:
            for i in range(start[node], end[node]):
                p = perm[i]
                d2 = _dist2(points, p, q)
                if d2 <= r2:
                    if n < cap:
                        out_i[n] = p + id_offset
                        out_d[n] = d2
                    n += 1
        else:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = left[node]
            sp += 1
    return n


@njit(cache=True)
def _sort_pairs(ids, d2):
    order = np.argsort(ids, kind="mergesort")
    ids_s = ids[order]
    d_s = d2[order]
    order2 = np.argsort(d_s, kind="mergesort")
    return ids_s[order2], d_s[order2]


@njit(cache=True, parallel=True)
def _radius_batch(points, perm, start, end, left, right, lo, hi, queries, r2, id_offset):
    m = queries.shape[0]
    counts = np.zeros(m, np.int64)
    dummy_i = np.empty(0, np.int64)
    dummy_d = np.empty(0)
    for j in prange(m):
        counts[j] = _radius_visit(points, perm, start, end, left, right, lo, hi,
                                  queries[j], r2, dummy_i, dummy_d, id_offset)
    offsets = np.zeros(m + 1, np.int64)
    for j in range(m):
        offsets[j + 1] = offsets[j] + counts[j]
    ids = np.empty(offsets[m], np.int64)
    d2 = np.empty(offsets[m])
    for j in prange(m):
        a = offsets[j]
        b = offsets[j + 1]
        _radius_visit(points, perm, start, end, left, right, lo, hi,
                      queries[j], r2, ids[a:b], d2[a:b], id_offset)
        si, sd = _sort_pairs(ids[a:b], d2[a:b])
        ids[a:b] = si
        d2[a:b] = sd
    return offsets, ids, d2


class KDTree:
    """Static balanced kd-tree over an ``(N, 3)`` array.

    Point ids are row indices into ``points`` (plus ``id_offset``).
    """

    def __init__(self, points, leaf_size: int = DEFAULT_LEAF_SIZE, id_offset: int = 0):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must have shape (N, 3)")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.points = pts
        self.points.setflags(write=False)
        self.leaf_size = int(leaf_size)
        self.id_offset = int(id_offset)
        (self._perm, self._start, self._end, self._left, self._right,
         self._lo, self._hi, comparisons) = _build(pts, self.leaf_size)
        self.build_comparisons = int(comparisons)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.size

    def _arrays(self):
        return (self.points, self._perm, self._start, self._end, self._left,
                self._right, self._lo, self._hi)

    def knn_sq(self, queries, k: int):
        """Batched k-NN returning ``(ids, squared distances)``, padded with -1 / inf."""
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        if k < 1:
            raise ValueError("k must be >= 1")
        return _knn_batch(*self._arrays(), q, int(k), self.id_offset)

    def knn_batch(self, queries, k: int):
        ids, d2 = self.knn_sq(queries, k)
        return ids, np.sqrt(d2)

    def knn(self, query, k: int):
        ids, d = self.knn_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        valid = ids[0] >= 0
        return list(zip(ids[0][valid].tolist(), d[0][valid].tolist()))

    def radius_sq(self, queries, r: float):
        """Batched radius search: ``(offsets, ids, squared distances)`` in CSR layout."""
        if not r > 0:
            raise ValueError("radius must be positive")
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        return _radius_batch(*self._arrays(), q, float(r) * float(r), self.id_offset)

    def radius_search(self, query, r: float):
        offsets, ids, d2 = self.radius_sq(np.asarray(query, dtype=np.float64).reshape(1, 3), r)
        return list(zip(ids.tolist(), np.sqrt(d2).tolist()))


def _merge_knn(parts, k):
    ids = np.concatenate([p[0] for p in parts], axis=1)
    d2 = np.concatenate([p[1] for p in parts], axis=1)
    # invalid slots carry inf distance and must sort after every real id
    sort_ids = np.where(ids < 0, np.iinfo(np.int64).max, ids)
    order = np.lexsort((sort_ids, d2), axis=1)[:, :k]
    return np.take_along_axis(ids, order, axis=1), np.take_along_axis(d2, order, axis=1)


class IncrementalIndex:
    """kd-tree supporting batched insertion.

    Query results always equal those of a freshly built :class:`KDTree` over
    every point inserted so far (ids are insertion order, duplicates kept).
    """

    def __init__(self, points=None, leaf_size: int = DEFAULT_LEAF_SIZE,
                 rebuild_ratio: float = DEFAULT_REBUILD_RATIO):
        if not 0 < rebuild_ratio <= 1:
            raise ValueError("rebuild_ratio must be in (0, 1]")
        self.leaf_size = int(leaf_size)
        self.rebuild_ratio = float(rebuild_ratio)
        pts = np.zeros((0, 3)) if points is None else np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self._data = np.array(pts, dtype=np.float64, copy=True)
        self._n = self._data.shape[0]
        self.rebuild_count = 0
        self._main = KDTree(self._data[: self._n], self.leaf_size)
        self._buffer = KDTree(np.zeros((0, 3)), self.leaf_size, id_offset=self._n)

    @property
    def size(self) -> int:
        return self._n

    def __len__(self) -> int:
        return self._n

    @property
    def points(self) -> np.ndarray:
        view = self._data[: self._n]
        view.setflags(write=False)
        return view

    @property
    def buffered(self) -> int:
        return self._buffer.size

    def insert(self, points) -> None:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if len(pts) == 0:
            return
        need = self._n + len(pts)
        if need > self._data.shape[0]:
            cap = max(need, 2 * self._data.shape[0], 64)
            grown = np.empty((cap, 3))
            grown[: self._n] = self._data[: self._n]
            self._data = grown
        self._data[self._n : need] = pts
        self._n = need
        main_n = self._main.size
        if (self._n - main_n) > self.rebuild_ratio * self._n:
            self._rebuild()
        else:
            self._buffer = KDTree(self._data[main_n : self._n].copy(), self.leaf_size, id_offset=main_n)

    def _rebuild(self):
        self._main = KDTree(self._data[: self._n].copy(), self.leaf_size)
        self._buffer = KDTree(np.zeros((0, 3)), self.leaf_size, id_offset=self._n)
        self.rebuild_count += 1

    def knn_sq(self, queries, k: int):
        a = self._main.knn_sq(queries, k)
        if self._buffer.size == 0:
            return a
        return _merge_knn([a, self._buffer.knn_sq(queries, k)], k)

    def knn_batch(self, queries, k: int):
        ids, d2 = self.knn_sq(queries, k)
        return ids, np.sqrt(d2)

    def knn(self, query, k: int):
        ids, d = self.knn_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        valid = ids[0] >= 0
        return list(zip(ids[0][valid].tolist(), d[0][valid].tolist()))

    def radius_sq(self, queries, r: float):
        a = self._main.radius_sq(queries, r)
        if self._buffer.size == 0:
            return a
        b = self._buffer.radius_sq(queries, r)
        m = len(a[0]) - 1
        offsets = a[0] + b[0]
        ids = np.empty(offsets[-1], np.int64)
        d2 = np.empty(offsets[-1])
        for j in range(m):
            si = np.concatenate([a[1][a[0][j]:a[0][j + 1]], b[1][b[0][j]:b[0][j + 1]]])
            sd = np.concatenate([a[2][a[0][j]:a[0][j + 1]], b[2][b[0][j]:b[0][j + 1]]])
            order = np.lexsort((si, sd))
            ids[offsets[j]:offsets[j + 1]] = si[order]
            d2[offsets[j]:offsets[j + 1]] = sd[order]
        return offsets, ids, d2

    def radius_search(self, query, r: float):
        offsets, ids, d2 = self.radius_sq(np.asarray(query, dtype=np.float64).reshape(1, 3), r)
        return list(zip(ids.tolist(), np.sqrt(d2).tolist()))


def build_index(points, leaf_size: int = DEFAULT_LEAF_SIZE) -> KDTree:
    return KDTree(points, leaf_size)


def knn(index, query, k: int):
    """``k`` nearest neighbours as ``[(id, distance), ...]`` sorted ascending."""
    return index.knn(query, k)


def radius_search(index, query, r: float):
    return index.radius_search(query, r)


def insert(index: IncrementalIndex, points) -> None:
    index.insert(points)
