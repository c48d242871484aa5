import numpy as np
import pytest

from halfpel.image_core import save_pgm

SKIMAGE_NAMES = (
    "astronaut", "camera", "chelsea", "coffee", "coins", "moon", "gravel", "brick", "grass", "retina",
    "rocket", "hubble_deep_field", "motorcycle_left", "motorcycle_right", "page", "text", "cell",
    "immunohistochemistry", "clock", "microaneurysms",
)


def _gray(name):
    data = pytest.importorskip("skimage.data")
    color = pytest.importorskip("skimage.color")
    if name.startswith("motorcycle"):
        left, right, _ = data.stereo_motorcycle()
        return color.rgb2gray(left if name.endswith("left") else right) * 255.0
    im = np.asarray(getattr(data, name)())
    if im.ndim == 3:
        return color.rgb2gray(im[..., :3]) * 255.0
    if im.dtype == bool:
        return im * 255.0
    if im.max() <= 1.0:
        return im * 255.0
    return im.astype(np.float64)


def natural_images(crop=160):
    """Twenty grayscale natural images, centre-cropped, on the 0..255 scale."""
    out = []
    for name in SKIMAGE_NAMES:
        im = _gray(name)
        h, w = im.shape
        ch, cw = min(crop, h), min(crop, w)
        y0, x0 = (h - ch) // 2, (w - cw) // 2
        out.append(np.asarray(im[y0 : y0 + ch, x0 : x0 + cw], dtype=np.float64))
    return out


@pytest.fixture(scope="session")
def natural_corpus(tmp_path_factory):
    """Directory of 20 natural-image PGMs plus the rounded planes themselves."""
    d = tmp_path_factory.mktemp("corpus")
    planes = []
    for i, im in enumerate(natural_images()):
        path = d / f"img{i:02d}.pgm"
        save_pgm(im, path)
        planes.append(np.clip(np.floor(im + 0.5), 0, 255))
    return d, planes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_image(seed=0, size=96):
    """Band-limited random texture: cheap stand-in for natural content."""
    r = np.random.default_rng(seed)
    f = np.fft.fft2(r.normal(size=(size, size)))
    ky = np.fft.fftfreq(size)[:, None]
    kx = np.fft.fftfreq(size)[None, :]
    f *= np.exp(-((kx**2 + ky**2) / (2 * 0.06**2)))
    im = np.real(np.fft.ifft2(f))
    im = (im - im.min()) / (im.max() - im.min())
    return 20.0 + 215.0 * im


# criterion id -> one-line verdict, printed after the run
ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
