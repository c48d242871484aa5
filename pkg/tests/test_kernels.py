import numpy as np
import pytest

from halfpel import _kernels

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")


def brute_search(cur, planes, bs, r):
    """Re-scan every candidate the search may visit and return its minimum SAD per block."""
    h, w = cur.shape
    nby, nbx = -(-h // bs), -(-w // bs)

    def sad(y0, x0, dx, dy):
        p = planes[(dx & 1) + 2 * (dy & 1)]
        total = 0.0
        for y in range(y0, min(h, y0 + bs)):
            for x in range(x0, min(w, x0 + bs)):
                yy = min(max(y + (dy >> 1), 0), h - 1)
                xx = min(max(x + (dx >> 1), 0), w - 1)
                total += abs(cur[y, x] - p[yy, xx])
        return total

    out = np.zeros((nby, nbx))
    for by in range(nby):
        for bx in range(nbx):
            ints = {
                (2 * dx, 2 * dy): sad(by * bs, bx * bs, 2 * dx, 2 * dy)
                for dy in range(-r, r + 1)
                for dx in range(-r, r + 1)
            }
            best_int = min(ints, key=lambda k: (ints[k], abs(k[0]) + abs(k[1]), k[1], k[0]))
            cands = dict(ints)
            cx, cy = best_int
            for ddy in (-1, 0, 1):
                for ddx in (-1, 0, 1):
                    dx, dy = cx + ddx, cy + ddy
                    if abs(dx) <= 2 * r and abs(dy) <= 2 * r:
                        cands[(dx, dy)] = sad(by * bs, bx * bs, dx, dy)
            # every integer candidate scores >= best_int, so the overall minimum is the refined one
            out[by, bx] = min(cands.values())
    return out


@pytest.mark.parametrize("offset", [-3, -2, 0, 1])
def test_filter_rows_reference(rng, offset):
    x = rng.normal(size=(5, 11))
    taps = rng.normal(size=6)
    out = _kernels.filter_rows_numpy(x, taps, offset)
    ref = np.zeros_like(x)
    for y in range(5):
        for i in range(11):
            ref[y, i] = sum(taps[k] * x[y, min(max(i + k + offset, 0), 10)] for k in range(6))
    np.testing.assert_allclose(out, ref, atol=1e-12)


@needs_numba
def test_filter_rows_backends_bit_identical(rng):
    x = rng.uniform(0, 255, (37, 53))
    taps = np.array([-1, 4, -11, 40, 40, -11, 4, -1], dtype=float)
    assert np.array_equal(_kernels.filter_rows_numba(x, taps, -3), _kernels.filter_rows_numpy(x, taps, -3))


def _field(rng, h, w):
    return [rng.integers(0, 256, (h, w)).astype(float) for _ in range(4)]


@pytest.mark.parametrize("shape,bs,r", [((24, 24), 8, 2), ((21, 30), 8, 3), ((16, 16), 16, 1)])
def test_numpy_search_is_optimal(rng, shape, bs, r):
    planes = _field(rng, *shape)
    cur = rng.integers(0, 256, shape).astype(float)
    mvs, sads = _kernels.block_search_numpy(cur, *planes, bs, r)
    np.testing.assert_allclose(sads, brute_search(cur, planes, bs, r), atol=1e-9)
    assert np.all(np.abs(mvs) <= 2 * r)


@needs_numba
@pytest.mark.parametrize("seed", range(4))
def test_search_backends_agree(seed):
    r = np.random.default_rng(seed)
    shape = (int(r.integers(16, 40)), int(r.integers(16, 40)))
    planes = _field(r, *shape)
    # a smooth-ish current frame produces plenty of SAD ties to exercise tie-breaking
    cur = np.round(planes[0] / 64.0) * 64.0
    planes = [np.round(p / 64.0) * 64.0 for p in planes]
    a = _kernels.block_search_numba(cur, *planes, 8, 3)
    b = _kernels.block_search_numpy(cur, *planes, 8, 3)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


def test_tie_prefers_zero_motion():
    flat = np.full((16, 16), 50.0)
    mvs, sads = _kernels.block_search_numpy(flat, flat, flat, flat, flat, 8, 2)
    assert np.all(mvs == 0) and np.all(sads == 0)


def test_backend_name():
    assert _kernels.backend() in ("numba", "numpy")


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_search_backends_bit_identical_real_valued(seed):
    # interpolated planes are not integer-valued, so summation order matters
    r = np.random.default_rng(seed)
    planes = [r.uniform(0, 255, (45, 53)) for _ in range(4)]
    cur = r.uniform(0, 255, (45, 53))
    a = _kernels.block_search_numba(cur, *planes, 16, 4)
    b = _kernels.block_search_numpy(cur, *planes, 16, 4)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
