"""Hot inner loops: separable row filtering and block-matching search.

Each kernel exists twice, as a numba ``@njit`` function and as a pure-numpy
fallback with the same accumulation order. ``HALFPEL_NUMBA=0`` (or numba
being unavailable) selects the numpy path; both stay importable so tests and
``benchmarks/bench_kernels.py`` can compare them directly.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
    # an outdated system TBB only produces a warning; prefer the other layers
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("HALFPEL_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)


# ---------------------------------------------------------------------------
# Row filtering with replicate edges
# ---------------------------------------------------------------------------


def filter_rows_numpy(x, taps, offset):
    """out[y, i] = sum_k taps[k] * x[y, clamp(i + k + offset)]."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    taps = np.asarray(taps, dtype=np.float64)
    n = taps.shape[0]
    width = x.shape[1]
    left = max(0, -offset)
    right = max(0, n - 1 + offset)
    xp = np.pad(x, ((0, 0), (left, right)), mode="edge")
    out = np.zeros_like(x)
    for k in range(n):
        start = k + offset + left
        out += taps[k] * xp[:, start : start + width]
    return out


def _seq_sad(preds, blk):
    # SAD of each row of preds against blk, accumulated pixel by pixel in
    # raster order like the numba loop (np.sum would add pairwise)
    d = np.abs(preds - blk.ravel()).T.copy()
    out = np.zeros(d.shape[1])
    for row in d:
        out += row
    return out


def _search_numpy(cur, planes, block_size, search_range):
    height, width = cur.shape
    nby = -(-height // block_size)
    nbx = -(-width // block_size)
    r = search_range
    padded = np.pad(planes[0], r, mode="edge")
    mvs = np.zeros((nby, nbx, 2), dtype=np.int64)
    sads = np.zeros((nby, nbx), dtype=np.float64)

    ints = np.arange(-r, r + 1)
    iy_grid, ix_grid = np.meshgrid(ints, ints, indexing="ij")
    dx_int = (2 * ix_grid).ravel()
    dy_int = (2 * iy_grid).ravel()
    l1_int = np.abs(dx_int) + np.abs(dy_int)

    for by in range(nby):
        y0 = by * block_size
        bh = min(block_size, height - y0)
        for bx in range(nbx):
            x0 = bx * block_size
            bw = min(block_size, width - x0)
            blk = cur[y0 : y0 + bh, x0 : x0 + bw]
            region = padded[y0 : y0 + bh + 2 * r, x0 : x0 + bw + 2 * r]
            win = np.lib.stride_tricks.sliding_window_view(region, (bh, bw))
            cost = _seq_sad(win.reshape(-1, bh * bw), blk)
            order = np.lexsort((dx_int, dy_int, l1_int, cost))
            best = order[0]
            best_dx, best_dy, best_sad = int(dx_int[best]), int(dy_int[best]), cost[best]

            cx, cy = best_dx, best_dy
            rows = np.arange(y0, y0 + bh)
            cols = np.arange(x0, x0 + bw)
            cands, preds = [], []
            for ddy in (-1, 0, 1):
                for ddx in (-1, 0, 1):
                    dx = cx + ddx
                    dy = cy + ddy
                    if (ddx == 0 and ddy == 0) or abs(dx) > 2 * r or abs(dy) > 2 * r:
                        continue
                    plane = planes[(dx & 1) + 2 * (dy & 1)]
                    ry = np.clip(rows + (dy >> 1), 0, height - 1)
                    rx = np.clip(cols + (dx >> 1), 0, width - 1)
                    cands.append((dx, dy))
                    preds.append(plane[np.ix_(ry, rx)].ravel())
            costs = _seq_sad(np.array(preds), blk) if preds else []
            for (dx, dy), sad in zip(cands, costs):
                if _better(sad, dx, dy, best_sad, best_dx, best_dy):
                    best_sad, best_dx, best_dy = sad, dx, dy
            mvs[by, bx, 0] = best_dx
            mvs[by, bx, 1] = best_dy
            sads[by, bx] = best_sad
    return mvs, sads


def _better(sad, dx, dy, best_sad, best_dx, best_dy):
    if sad != best_sad:
        return sad < best_sad
    key = (abs(dx) + abs(dy), dy, dx)
    best_key = (abs(best_dx) + abs(best_dy), best_dy, best_dx)
    return key < best_key


def block_search_numpy(cur, a, b, h, j, block_size, search_range):
    planes = np.stack([a, b, h, j]).astype(np.float64, copy=False)
    return _search_numpy(np.asarray(cur, dtype=np.float64), planes, block_size, search_range)


# ---------------------------------------------------------------------------
# numba versions
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _filter_rows_nb(x, taps, offset):
        height, width = x.shape
        n = taps.shape[0]
        out = np.empty_like(x)
        for y in range(height):
            for i in range(width):
                acc = 0.0
                for k in range(n):
                    c = i + k + offset
                    if c < 0:
                        c = 0
                    elif c >= width:
                        c = width - 1
                    acc += taps[k] * x[y, c]
                out[y, i] = acc
        return out

    @njit(cache=True)
    def _clamp(v, hi):
        if v < 0:
            return 0
        if v > hi:
            return hi
        return v

    @njit(cache=True)
    def _block_sad(cur, plane, y0, x0, bh, bw, oy, ox):
        height, width = plane.shape
        s = 0.0
        for yy in range(bh):
            ry = _clamp(y0 + yy + oy, height - 1)
            for xx in range(bw):
                rx = _clamp(x0 + xx + ox, width - 1)
                s += abs(cur[y0 + yy, x0 + xx] - plane[ry, rx])
        return s

    @njit(cache=True)
    def _better_nb(sad, dx, dy, best_sad, best_dx, best_dy):
        if sad != best_sad:
            return sad < best_sad
        l1 = abs(dx) + abs(dy)
        best_l1 = abs(best_dx) + abs(best_dy)
        if l1 != best_l1:
            return l1 < best_l1
        if dy != best_dy:
            return dy < best_dy
        return dx < best_dx

    @njit(cache=True, parallel=True)
    def _search_nb(cur, planes, block_size, search_range):
        height, width = cur.shape
        nby = (height + block_size - 1) // block_size
        nbx = (width + block_size - 1) // block_size
        r = search_range
        mvs = np.zeros((nby, nbx, 2), dtype=np.int64)
        sads = np.zeros((nby, nbx), dtype=np.float64)
        # one block per iteration; results land in disjoint cells
        for idx in prange(nby * nbx):
            by = idx // nbx
            bx = idx % nbx
            y0 = by * block_size
            x0 = bx * block_size
            bh = min(block_size, height - y0)
            bw = min(block_size, width - x0)
            best_sad = np.inf
            best_dx = 0
            best_dy = 0
            for iy in range(-r, r + 1):
                for ix in range(-r, r + 1):
                    sad = _block_sad(cur, planes[0], y0, x0, bh, bw, iy, ix)
                    if _better_nb(sad, 2 * ix, 2 * iy, best_sad, best_dx, best_dy):
                        best_sad = sad
                        best_dx = 2 * ix
                        best_dy = 2 * iy
            cx = best_dx
            cy = best_dy
            for ddy in range(-1, 2):
                for ddx in range(-1, 2):
                    if ddx == 0 and ddy == 0:
                        continue
                    dx = cx + ddx
                    dy = cy + ddy
                    if abs(dx) > 2 * r or abs(dy) > 2 * r:
                        continue
                    p = (dx & 1) + 2 * (dy & 1)
                    sad = _block_sad(cur, planes[p], y0, x0, bh, bw, dy >> 1, dx >> 1)
                    if _better_nb(sad, dx, dy, best_sad, best_dx, best_dy):
                        best_sad = sad
                        best_dx = dx
                        best_dy = dy
            mvs[by, bx, 0] = best_dx
            mvs[by, bx, 1] = best_dy
            sads[by, bx] = best_sad
        return mvs, sads

    def filter_rows_numba(x, taps, offset):
        x = np.ascontiguousarray(x, dtype=np.float64)
        taps = np.ascontiguousarray(taps, dtype=np.float64)
        return _filter_rows_nb(x, taps, int(offset))

    def block_search_numba(cur, a, b, h, j, block_size, search_range):
        planes = np.ascontiguousarray(np.stack([a, b, h, j]), dtype=np.float64)
        cur = np.ascontiguousarray(cur, dtype=np.float64)
        return _search_nb(cur, planes, int(block_size), int(search_range))

    def set_threads(n):
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))

else:  # pragma: no cover
    filter_rows_numba = filter_rows_numpy
    block_search_numba = block_search_numpy

    def set_threads(n):
        pass


if USE_NUMBA:
    filter_rows = filter_rows_numba
    block_search = block_search_numba
else:
    filter_rows = filter_rows_numpy
    block_search = block_search_numpy


def filter_cols(x, taps, offset):
    """Column analogue of :func:`filter_rows`."""
    return filter_rows(np.ascontiguousarray(np.asarray(x).T), taps, offset).T.copy()


def backend():
    return "numba" if USE_NUMBA else "numpy"
