"""Three-layer convolutional interpolation network trained from scratch.

Layers are ``conv 9x9 (1->64) + ReLU``, ``conv 1x1 (64->32) + ReLU`` and a
linear ``conv 5x5 (32->1)``. Every convolution uses replicate padding so the
output has the input's size. Internally activations are channels-last
``(N, H, W, C)`` and convolutions are im2col matrix products.

Scale convention: the network works on samples divided by 255.
:func:`interpolate_plane` does the conversion; :func:`forward` and
:func:`loss` are scale-agnostic, and :class:`LossCurve` values are reported
on the 0..255 scale.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import HalfpelError, PreconditionError
from .image_core import MAX_VALUE, as_plane

log = logging.getLogger(__name__)

STANDARD_SHAPES = ((64, 1, 9, 9), (32, 64, 1, 1), (1, 32, 5, 5))
POSITION_CODES = {"H": 0, "V": 1, "D": 2, "S": 3}
UNTAGGED = 255
# cap on im2col buffer size (elements) per chunk
_COLS_BUDGET = 1 << 22


class NetworkConfigError(HalfpelError, ValueError):
    pass


@dataclass
class ConvLayer:
    weights: np.ndarray
    bias: np.ndarray
    relu: bool

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise NetworkConfigError(f"conv weights must be a non-empty 4-D tensor, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise NetworkConfigError("bias length must equal out_channels")
        kh, kw = self.weights.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise NetworkConfigError(f"kernel extents must be odd, got {kh}x{kw}")

    @property
    def shape(self):
        return self.weights.shape


@dataclass
class Network:
    layer1: ConvLayer
    layer2: ConvLayer
    layer3: ConvLayer
    position: str | None = None
    qp: int | None = None

    def __post_init__(self):
        l1, l2, l3 = self.layers
        if l1.shape[1] != 1 or l3.shape[0] != 1:
            raise NetworkConfigError("network must map one channel to one channel")
        if l2.shape[1] != l1.shape[0] or l3.shape[1] != l2.shape[0]:
            raise NetworkConfigError("layer channel counts do not chain")
        if not (l1.relu and l2.relu) or l3.relu:
            raise NetworkConfigError("layers 1-2 use ReLU, layer 3 is linear")
        if self.position is not None and self.position not in POSITION_CODES:
            raise NetworkConfigError(f"unknown position tag {self.position!r}")

    @property
    def layers(self):
        return (self.layer1, self.layer2, self.layer3)

    @property
    def shapes(self):
        return tuple(layer.shape for layer in self.layers)

    @property
    def max_extent(self) -> int:
        return max(max(s[2], s[3]) for s in self.shapes)

    def params(self):
        """Flat list ``[W1, b1, W2, b2, W3, b3]`` (views, not copies)."""
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    @classmethod
    def from_params(cls, params, position=None, qp=None):
        w1, b1, w2, b2, w3, b3 = params
        return cls(
            ConvLayer(w1, b1, True),
            ConvLayer(w2, b2, True),
            ConvLayer(w3, b3, False),
            position=position,
            qp=qp,
        )

    def copy(self):
        return Network.from_params([p.copy() for p in self.params()], self.position, self.qp)

    def equals(self, other) -> bool:
        return (
            self.position == other.position
            and self.qp == other.qp
            and all(np.array_equal(p, q) for p, q in zip(self.params(), other.params()))
        )


def init_network(init_std=0.001, seed=0, shapes=STANDARD_SHAPES, position=None, qp=None) -> Network:
    """Gaussian weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for shape in shapes:
        params.append(rng.normal(0.0, init_std, size=shape))
        params.append(np.zeros(shape[0]))
    return Network.from_params(params, position, qp)


def constant_network(beta: float, shapes=STANDARD_SHAPES, position=None, qp=None) -> Network:
    """All weights zero; output bias ``beta``."""
    params = []
    for shape in shapes:
        params += [np.zeros(shape), np.zeros(shape[0])]
    params[-1][:] = beta
    return Network.from_params(params, position, qp)


INIT_MODES = ("gaussian", "linear")
LINEAR_RIDGE = 1e-6


def fit_linear_filter(x, y, size: int, ridge: float = LINEAR_RIDGE):
    """Ridge least-squares ``size x size`` filter plus offset mapping ``x`` onto ``y``.

    ``x`` and ``y`` are ``(n, H, W)`` batches; borders replicate, as in the network.
    Returns ``(kernel, offset)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = size // 2
    dim = size * size + 1
    gram = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    for i in range(len(x)):
        xp = np.pad(x[i], r, mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(xp, (size, size)).reshape(-1, size * size)
        a = np.hstack([win, np.ones((len(win), 1))])
        gram += a.T @ a
        rhs += a.T @ y[i].ravel()
    n = x.shape[0] * x.shape[1] * x.shape[2]
    w = np.linalg.solve(gram + ridge * n * np.eye(dim), rhs)
    return w[:-1].reshape(size, size), float(w[-1])


def linear_init(x, y, init_std=0.001, seed=0, shapes=STANDARD_SHAPES, position=None, qp=None) -> Network:
    """Gaussian network with a least-squares linear filter embedded exactly.

    Two first-layer channels carry ``k*x`` and ``-k*x``; layer 2 passes each through
    and layer 3 takes their difference, so ``relu(z) - relu(-z) = z`` reproduces
    the filter. Every other weight is Gaussian as in :func:`init_network`.
    """
    (c1, _, kh, kw), (c2, _, _, _), (_, _, k3h, k3w) = shapes
    if kh != kw or c1 < 2 or c2 < 2:
        raise PreconditionError("linear init needs a square first kernel and two channels per hidden layer")
    kernel, offset = fit_linear_filter(x, y, kh)
    params = init_network(init_std, seed, shapes).params()
    w1, _, w2, b2, w3, b3 = params
    w1[0, 0], w1[1, 0] = kernel, -kernel
    w2[:2] = 0.0
    w2[:, :2] = 0.0
    w2[0, 0, 0, 0] = w2[1, 1, 0, 0] = 1.0
    b2[:2] = 0.0
    w3[0, :2] = 0.0
    w3[0, 0, k3h // 2, k3w // 2] = 1.0
    w3[0, 1, k3h // 2, k3w // 2] = -1.0
    b3[0] = offset
    return Network.from_params(params, position, qp)


@dataclass(frozen=True)
class Hyperparams:
    lr_front: float = 1e-4
    lr_last: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    init_std: float = 0.001
    init: str = "gaussian"

    def __post_init__(self):
        if self.init not in INIT_MODES:
            raise PreconditionError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.lr_front <= 0 or self.lr_last <= 0:
            raise PreconditionError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise PreconditionError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise PreconditionError("batch_size and epochs must be positive")
        if self.init_std <= 0:
            raise PreconditionError("init_std must be positive")


@dataclass
class LossCurve:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Convolution primitives (channels-last)
# ---------------------------------------------------------------------------


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode="edge")


def _unpad_grad(g, ph, pw):
    """Adjoint of replicate padding: fold border gradients onto the edge samples."""
    if ph:
        top = g[:, :ph].sum(axis=1)
        bottom = g[:, -ph:].sum(axis=1)
        g = g[:, ph:-ph].copy()
        g[:, 0] += top
        g[:, -1] += bottom
    if pw:
        left = g[:, :, :pw].sum(axis=2)
        right = g[:, :, -pw:].sum(axis=2)
        g = g[:, :, pw:-pw].copy()
        g[:, :, 0] += left
        g[:, :, -1] += right
    return g


def _chunks(n, row_elems):
    step = max(1, _COLS_BUDGET // max(1, row_elems))
    return [slice(s, min(n, s + step)) for s in range(0, n, step)]


def _im2col(xp, kh, kw, height, width):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (n, H, W, C, kh, kw) -> rows ordered (c, ky, kx)
    n, c = xp.shape[0], xp.shape[3]
    return win.reshape(n * height * width, c * kh * kw)


def _wmat(layer):
    o = layer.weights.shape[0]
    return layer.weights.reshape(o, -1).T


def _tap_weights(layer):
    o, c, kh, kw = layer.shape
    # columns ordered (ky, kx, o)
    return layer.weights.transpose(1, 2, 3, 0).reshape(c, kh * kw * o)


def _tap_forward(xp, layer, height, width):
    """Convolution for few output channels: one GEMM over the padded input
    yields every tap's contribution, then shifted tap planes are summed."""
    o, c, kh, kw = layer.shape
    n, hp, wp, _ = xp.shape
    g = (xp.reshape(-1, c) @ _tap_weights(layer)).reshape(n, hp, wp, kh, kw, o)
    out = np.zeros((n, height, width, o))
    for ky in range(kh):
        for kx in range(kw):
            out += g[:, ky : ky + height, kx : kx + width, ky, kx, :]
    out += layer.bias
    return out


def _tap_backward(xp, dz, layer, need_dx):
    o, c, kh, kw = layer.shape
    n, hp, wp, _ = xp.shape
    height, width = dz.shape[1:3]
    spread = np.zeros((n, hp, wp, kh, kw, o))
    for ky in range(kh):
        for kx in range(kw):
            spread[:, ky : ky + height, kx : kx + width, ky, kx, :] = dz
    spread = spread.reshape(-1, kh * kw * o)
    dwt = xp.reshape(-1, c).T @ spread
    dw = dwt.reshape(c, kh, kw, o).transpose(3, 0, 1, 2).copy()
    dxp = (spread @ _tap_weights(layer).T).reshape(n, hp, wp, c) if need_dx else None
    return dw, dxp


def _conv_forward(x, layer):
    n, height, width, c = x.shape
    o, _, kh, kw = layer.shape
    if kh == 1 and kw == 1:
        return x @ layer.weights[:, :, 0, 0].T + layer.bias
    xp = _pad(x, kh // 2, kw // 2)
    if o < c:
        return _tap_forward(xp, layer, height, width)
    wmat = _wmat(layer)
    out = np.empty((n, height, width, o))
    for sl in _chunks(n, height * width * c * kh * kw):
        cols = _im2col(xp[sl], kh, kw, height, width)
        out[sl] = (cols @ wmat).reshape(-1, height, width, o)
    out += layer.bias
    return out


def _conv_backward(x, dz, layer, need_dx=True):
    """Gradients of a convolution given dL/d(pre-activation)."""
    n, height, width, c = x.shape
    o, _, kh, kw = layer.shape
    db = dz.sum(axis=(0, 1, 2))
    if kh == 1 and kw == 1:
        w = layer.weights[:, :, 0, 0]
        dz2 = dz.reshape(-1, o)
        dw = (dz2.T @ x.reshape(-1, c)).reshape(o, c, 1, 1)
        dx = (dz @ w) if need_dx else None
        return dw, db, dx

    ph, pw = kh // 2, kw // 2
    xp = _pad(x, ph, pw)
    if o < c:
        dw, dxp = _tap_backward(xp, dz, layer, need_dx)
        return dw, db, (_unpad_grad(dxp, ph, pw) if need_dx else None)
    wmat = _wmat(layer)
    dwmat = np.zeros_like(wmat)
    dxp = np.zeros(xp.shape) if need_dx else None
    for sl in _chunks(n, height * width * c * kh * kw):
        cols = _im2col(xp[sl], kh, kw, height, width)
        dzc = dz[sl].reshape(-1, o)
        dwmat += cols.T @ dzc
        if need_dx:
            dcols = (dzc @ wmat.T).reshape(-1, height, width, c, kh, kw)
            target = dxp[sl]
            for ky in range(kh):
                for kx in range(kw):
                    target[:, ky : ky + height, kx : kx + width, :] += dcols[..., ky, kx]
    dw = dwmat.T.reshape(layer.shape)
    dx = _unpad_grad(dxp, ph, pw) if need_dx else None
    return dw, db, dx


def _forward_batch(net, x):
    """x: (N, H, W). Returns output (N, H, W) and the cache needed for backprop."""
    f0 = x[..., None]
    z1 = _conv_forward(f0, net.layer1)
    f1 = np.maximum(z1, 0.0)
    z2 = _conv_forward(f1, net.layer2)
    f2 = np.maximum(z2, 0.0)
    out = _conv_forward(f2, net.layer3)[..., 0]
    return out, (f0, z1, f1, z2, f2)


def _backward_batch(net, cache, dout):
    f0, z1, f1, z2, f2 = cache
    dw3, db3, df2 = _conv_backward(f2, dout[..., None], net.layer3)
    dz2 = df2 * (z2 > 0.0)
    dw2, db2, df1 = _conv_backward(f1, dz2, net.layer2)
    dz1 = df1 * (z1 > 0.0)
    dw1, db1, _ = _conv_backward(f0, dz1, net.layer1, need_dx=False)
    return [dw1, db1, dw2, db2, dw3, db3]


def loss_and_grads(net, x, y):
    """Mean (over items and pixels) squared error and its gradient for a batch."""
    out, cache = _forward_batch(net, x)
    diff = out - y
    value = float(np.mean(diff * diff))
    dout = 2.0 * diff / diff.size
    return value, _backward_batch(net, cache, dout)


# ---------------------------------------------------------------------------
# Public single-plane API
# ---------------------------------------------------------------------------


def _check_input(net, plane):
    p = as_plane(plane)
    if min(p.shape) < net.max_extent:
        raise PreconditionError(
            f"input {p.shape[1]}x{p.shape[0]} smaller than largest kernel extent {net.max_extent}"
        )
    return p


def forward(net: Network, plane) -> np.ndarray:
    p = _check_input(net, plane)
    out, _ = _forward_batch(net, p[None])
    return out[0]


def forward_many(net: Network, planes: np.ndarray, batch: int = 16) -> np.ndarray:
    planes = np.asarray(planes, dtype=np.float64)
    out = np.empty_like(planes)
    for s in range(0, len(planes), batch):
        out[s : s + batch] = _forward_batch(net, planes[s : s + batch])[0]
    return out


def interpolate_plane(net: Network, plane) -> np.ndarray:
    """Run the network on a 0..255 plane, returning 0..255 clipped samples."""
    return np.clip(forward(net, as_plane(plane) / MAX_VALUE) * MAX_VALUE, 0.0, MAX_VALUE)


def loss(output, label) -> float:
    o, y = as_plane(output), as_plane(label)
    if o.shape != y.shape:
        raise PreconditionError(f"loss needs equal shapes, got {o.shape} and {y.shape}")
    d = o - y
    return float(np.mean(d * d))


def backward(net: Network, plane, label):
    """Analytic gradients ``[dW1, db1, dW2, db2, dW3, db3]`` of :func:`loss`."""
    p = _check_input(net, plane)
    y = as_plane(label)
    if y.shape != p.shape:
        raise PreconditionError("label and input shapes differ")
    return loss_and_grads(net, p[None], y[None])[1]


def zero_state(net: Network):
    return [np.zeros_like(p) for p in net.params()]


def sgd_step(net: Network, grads, state, hp: Hyperparams):
    """Momentum SGD: ``v <- m*v - lr*g; theta <- theta + v``.

    Layer 3 uses ``hp.lr_last``, layers 1-2 ``hp.lr_front``. Returns the new
    network and velocity list; inputs are left untouched.
    """
    params = net.params()
    if len(grads) != len(params) or len(state) != len(params):
        raise PreconditionError("gradient/state list does not match network")
    new_params, new_state = [], []
    for i, (p, g, v) in enumerate(zip(params, grads, state)):
        if p.shape != g.shape or p.shape != v.shape:
            raise PreconditionError("gradient shape mismatch")
        lr = hp.lr_last if i >= 4 else hp.lr_front
        v2 = hp.momentum * v - lr * g
        new_state.append(v2)
        new_params.append(p + v2)
    return Network.from_params(new_params, net.position, net.qp), new_state


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _stack(pairs):
    try:
        x = np.stack([np.asarray(p.input, dtype=np.float64) for p in pairs])
        y = np.stack([np.asarray(p.label, dtype=np.float64) for p in pairs])
    except ValueError:
        raise PreconditionError("all pairs in a dataset must share one patch size") from None
    return x / MAX_VALUE, y / MAX_VALUE


def _dataset_tags(pairs):
    tags = {(p.position, p.qp) for p in pairs}
    if len(tags) != 1:
        raise PreconditionError(f"dataset mixes tags {sorted(tags, key=str)}")
    return tags.pop()


def evaluate(net: Network, pairs, batch: int = 16) -> float:
    """Mean squared error on the 0..255 scale (network outputs are not clipped)."""
    x, y = _stack(pairs)
    out = forward_many(net, x, batch)
    return float(np.mean((out - y) ** 2)) * MAX_VALUE**2


def train(dataset, hp: Hyperparams = Hyperparams(), val=None, init: Network | None = None):
    """Train one network on pairs that share a (position, qp) tag.

    Shuffling draws only from ``hp.seed``, so identical inputs give
    bit-identical weights. ``val`` pairs, when given, are scored after every
    epoch; otherwise the validation column of the curve holds NaN.
    """
    dataset = list(dataset)
    if not dataset:
        raise PreconditionError("empty training set")
    position, qp = _dataset_tags(dataset)
    x, y = _stack(dataset)
    if min(x.shape[1:]) < 9:
        raise PreconditionError("patches smaller than the 9x9 first-layer kernel")

    if init is None and hp.init == "linear":
        net = linear_init(x, y, hp.init_std, hp.seed, position=position, qp=qp)
    elif init is None:
        net = init_network(hp.init_std, hp.seed, position=position, qp=qp)
    else:
        net = replace(init.copy(), position=position, qp=qp)
    state = zero_state(net)
    rng = np.random.default_rng(hp.seed)
    curve = LossCurve()
    n = len(x)
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, hp.batch_size):
            idx = order[s : s + hp.batch_size]
            value, grads = loss_and_grads(net, x[idx], y[idx])
            net, state = sgd_step(net, grads, state, hp)
            total += value * len(idx)
        curve.train.append(total / n * MAX_VALUE**2)
        curve.val.append(evaluate(net, val) if val else float("nan"))
        log.info("epoch %d/%d train %.4f val %.4f", epoch + 1, hp.epochs, curve.train[-1], curve.val[-1])
    return net, curve


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------

MAGIC = b"CNIF"
VERSION = 1
_HEADER = struct.Struct("<4sHBB")
_DIMS = struct.Struct("<4I")


class WeightFormatError(HalfpelError, ValueError):
    pass


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


class PayloadSizeError(WeightFormatError):
    pass


class TagMismatchError(WeightFormatError):
    pass


_CODE_TO_POSITION = {v: k for k, v in POSITION_CODES.items()}


def encode_weights(net: Network) -> bytes:
    pos = UNTAGGED if net.position is None else POSITION_CODES[net.position]
    qp = UNTAGGED if net.qp is None else int(net.qp)
    parts = [_HEADER.pack(MAGIC, VERSION, pos, qp)]
    for layer in net.layers:
        parts.append(_DIMS.pack(*layer.shape))
        parts.append(layer.weights.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


def save_weights(net: Network, path) -> None:
    Path(path).write_bytes(encode_weights(net))


def decode_weights(data: bytes, position=None, qp=None, shapes=None, source="<bytes>") -> Network:
    if len(data) < _HEADER.size:
        raise PayloadSizeError(f"{source}: file too short for header")
    magic, version, pos_code, qp_code = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported version {version}")
    if pos_code != UNTAGGED and pos_code not in _CODE_TO_POSITION:
        raise WeightFormatError(f"{source}: unknown position code {pos_code}")
    file_pos = None if pos_code == UNTAGGED else _CODE_TO_POSITION[pos_code]
    file_qp = None if qp_code == UNTAGGED else qp_code
    offset = _HEADER.size
    params = []
    for _ in range(3):
        if len(data) < offset + _DIMS.size:
            raise PayloadSizeError(f"{source}: truncated layer header")
        dims = _DIMS.unpack_from(data, offset)
        offset += _DIMS.size
        if min(dims) < 1:
            raise ShapeMismatchError(f"{source}: zero-sized layer {dims}")
        nw = int(np.prod(dims))
        need = 8 * (nw + dims[0])
        if len(data) < offset + need:
            raise PayloadSizeError(f"{source}: expected {need} bytes of layer data, found {len(data) - offset}")
        w = np.frombuffer(data, "<f8", nw, offset).reshape(dims).astype(np.float64)
        offset += 8 * nw
        b = np.frombuffer(data, "<f8", dims[0], offset).astype(np.float64)
        offset += 8 * dims[0]
        params += [w, b]
    if offset != len(data):
        raise PayloadSizeError(f"{source}: {len(data) - offset} trailing bytes")
    try:
        net = Network.from_params(params, file_pos, file_qp)
    except NetworkConfigError as exc:
        raise ShapeMismatchError(f"{source}: {exc}") from None
    if shapes is not None and net.shapes != tuple(tuple(s) for s in shapes):
        raise ShapeMismatchError(f"{source}: layer shapes {net.shapes} != expected {tuple(shapes)}")
    if position is not None and file_pos != position:
        raise TagMismatchError(f"{source}: position tag {file_pos} != requested {position}")
    if qp is not None and file_qp != qp:
        raise TagMismatchError(f"{source}: qp tag {file_qp} != requested {qp}")
    return net


def load_weights(path, position=None, qp=None, shapes=None) -> Network:
    return decode_weights(Path(path).read_bytes(), position, qp, shapes, source=str(path))
