"""Training-pair generation from an image corpus.

Each source image is cropped to even size, blurred, and split into its four
phases. The integer phase goes through the intra surrogate at every requested
QP and is cut into patches; the clean half-pel phases at the same grid
positions become the labels. One collection is produced per (position, QP).
"""

from __future__ import annotations

import csv
import glob
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, HalfpelError, PreconditionError
from .image_core import (
    DEFAULT_BLUR,
    BlurKernel,
    blur,
    crop_even,
    degrade_intra_surrogate,
    extract_phases,
    load_pgm,
    resize_bicubic,
)

log = logging.getLogger(__name__)

MODEL_QPS = (22, 27, 32, 37)
POSITIONS = ("H", "V", "D")
SR_POSITION = "S"
_PHASE_OF = {"H": "b", "V": "h", "D": "j"}


@dataclass
class TrainingPair:
    input: np.ndarray
    label: np.ndarray
    position: str
    qp: int | None
    source_id: str


@dataclass
class DatasetManifest:
    sources: list
    blur: BlurKernel = DEFAULT_BLUR
    qps: tuple = MODEL_QPS
    patch_size: int = 32
    stride: int = 16
    split_fraction: float = 0.8
    seed: int = 0
    # diagnostic switch: False feeds the clean integer phase to the network
    degrade: bool = True
    # also emit pairs for training a x2 super-resolution anchor network
    sr_pairs: bool = False

    def __post_init__(self):
        if not self.sources:
            raise ConfigError("manifest lists no sources")
        if len(set(self.sources)) != len(self.sources):
            raise ConfigError("manifest lists a source twice")
        bad = [q for q in self.qps if q not in MODEL_QPS]
        if bad or not self.qps:
            raise ConfigError(f"qps must be a non-empty subset of {MODEL_QPS}, got {self.qps}")
        if self.patch_size < 1 or self.stride < 1:
            raise ConfigError("patch_size and stride must be positive")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie strictly between 0 and 1")


# ---------------------------------------------------------------------------
# Manifest files (key=value)
# ---------------------------------------------------------------------------

MANIFEST_KEYS = {
    "sources",
    "blur_taps",
    "blur_sigma",
    "qps",
    "patch_size",
    "stride",
    "split_fraction",
    "seed",
    "degrade",
    "sr_pairs",
}


def read_key_values(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _split_list(value: str):
    return [s.strip() for s in value.split(",") if s.strip()]


def parse_manifest(path) -> DatasetManifest:
    path = Path(path)
    kv = read_key_values(path)
    unknown = set(kv) - MANIFEST_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown manifest keys {sorted(unknown)}")
    if "sources" not in kv:
        raise ConfigError(f"{path}: 'sources' is required")
    sources = []
    for entry in _split_list(kv["sources"]):
        full = entry if Path(entry).is_absolute() else str(path.parent / entry)
        if glob.has_magic(full):
            sources += sorted(glob.glob(full))
        else:
            sources.append(full)
    if "blur_taps" in kv and "blur_sigma" in kv:
        raise ConfigError(f"{path}: give blur_taps or blur_sigma, not both")
    try:
        if "blur_taps" in kv:
            kernel = BlurKernel(tuple(float(t) for t in _split_list(kv["blur_taps"])))
        elif "blur_sigma" in kv:
            kernel = BlurKernel.gaussian(float(kv["blur_sigma"]))
        else:
            kernel = DEFAULT_BLUR
        args = dict(
            qps=tuple(int(q) for q in _split_list(kv["qps"])) if "qps" in kv else MODEL_QPS,
            patch_size=int(kv.get("patch_size", 32)),
            stride=int(kv.get("stride", 16)),
            split_fraction=float(kv.get("split_fraction", 0.8)),
            seed=int(kv.get("seed", 0)),
        )
    except (ValueError, PreconditionError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return DatasetManifest(
        sources,
        kernel,
        degrade=_parse_bool(kv.get("degrade", "1")),
        sr_pairs=_parse_bool(kv.get("sr_pairs", "0")),
        **args,
    )


def format_manifest(m: DatasetManifest) -> str:
    lines = [
        "sources=" + ",".join(str(s) for s in m.sources),
        "blur_taps=" + ",".join(repr(t) for t in m.blur.taps),
        "qps=" + ",".join(str(q) for q in m.qps),
        f"patch_size={m.patch_size}",
        f"stride={m.stride}",
        f"split_fraction={m.split_fraction!r}",
        f"seed={m.seed}",
        f"degrade={int(m.degrade)}",
        f"sr_pairs={int(m.sr_pairs)}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    pairs: dict = field(default_factory=dict)  # (position, qp) -> list[TrainingPair]
    manifest: DatasetManifest | None = None

    def report_rows(self):
        rows = []
        for (pos, qp), pairs in self.pairs.items():
            rows.append(
                {
                    "position": pos,
                    "qp": "" if qp is None else qp,
                    "pairs": len(pairs),
                    "sources": len({p.source_id for p in pairs}),
                }
            )
        return rows


def patch_grid(height: int, width: int, patch_size: int, stride: int):
    """Top-left corners of the regular patch grid, row-major."""
    return [
        (y, x)
        for y in range(0, height - patch_size + 1, stride)
        for x in range(0, width - patch_size + 1, stride)
    ]


def _source_pairs(path: str, m: DatasetManifest):
    try:
        image = crop_even(load_pgm(path))
    except FileNotFoundError:
        raise ConfigError(f"source image not found: {path}") from None
    blurred = blur(image, m.blur)
    phases = extract_phases(blurred)
    height, width = phases.a.shape
    if min(height, width) < m.patch_size:
        raise ConfigError(
            f"{path}: phase planes {width}x{height} are smaller than patch_size {m.patch_size}"
        )
    grid = patch_grid(height, width, m.patch_size, m.stride)
    ps = m.patch_size
    out = {}
    for qp in m.qps:
        base = degrade_intra_surrogate(phases.a, qp) if m.degrade else phases.a
        for pos in POSITIONS:
            label = getattr(phases, _PHASE_OF[pos])
            out[(pos, qp)] = [
                TrainingPair(base[y : y + ps, x : x + ps].copy(), label[y : y + ps, x : x + ps].copy(), pos, qp, path)
                for y, x in grid
            ]
    if m.sr_pairs:
        out[(SR_POSITION, None)] = _sr_pairs(blurred, m, path)
    return out


def sr_training_planes(hr):
    """(network input, label) for x2 super-resolution of ``hr``.

    The low-resolution frame is an antialiased bicubic half-size copy; the
    input is its bicubic enlargement back to full size.
    """
    height, width = hr.shape
    lr = resize_bicubic(hr, height // 2, width // 2)
    return resize_bicubic(lr, height, width), hr


def _sr_pairs(hr, m, path):
    inp, label = sr_training_planes(hr)
    ps = m.patch_size
    return [
        TrainingPair(inp[y : y + ps, x : x + ps].copy(), label[y : y + ps, x : x + ps].copy(), SR_POSITION, None, path)
        for y, x in patch_grid(*hr.shape, ps, m.stride)
    ]


def build_dataset(manifest: DatasetManifest, workers: int = 1) -> Dataset:
    """Run the corpus through the pipeline; order is (source, patch grid)."""
    if not manifest.sources:
        raise ConfigError("empty corpus")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_source = list(pool.map(lambda s: _source_pairs(s, manifest), manifest.sources))
    ds = Dataset(manifest=manifest)
    keys = [(pos, qp) for qp in manifest.qps for pos in POSITIONS]
    if manifest.sr_pairs:
        keys.append((SR_POSITION, None))
    for key in keys:
        ds.pairs[key] = [p for src in per_source for p in src[key]]
    log.info("built %d collections from %d sources", len(keys), len(manifest.sources))
    return ds


def split_train_val(pairs, split_fraction: float, seed: int):
    """Split by source image so no source appears on both sides."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise PreconditionError("need at least two pairs to split")
    if not 0.0 < split_fraction < 1.0:
        raise PreconditionError("split_fraction must lie strictly between 0 and 1")
    sources = list(dict.fromkeys(p.source_id for p in pairs))
    if len(sources) < 2:
        raise PreconditionError("need at least two distinct sources to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sources))
    n_train = min(len(sources) - 1, max(1, int(round(split_fraction * len(sources)))))
    train_sources = {sources[i] for i in order[:n_train]}
    train = [p for p in pairs if p.source_id in train_sources]
    val = [p for p in pairs if p.source_id not in train_sources]
    return train, val


def select_model_qp(slice_qp: int) -> int:
    """Nearest of 22/27/32/37; an exact tie goes to the lower QP."""
    if int(slice_qp) != slice_qp or not 0 <= slice_qp <= 51:
        raise PreconditionError(f"slice qp must be an integer in 0..51, got {slice_qp}")
    return min(MODEL_QPS, key=lambda q: (abs(q - slice_qp), q))


# ---------------------------------------------------------------------------
# Shards
# ---------------------------------------------------------------------------

SHARD_MAGIC = b"CNDS"
SHARD_VERSION = 1
_SHARD_HEADER = struct.Struct("<4sHBBIIII")
_POS_CODE = {"H": 0, "V": 1, "D": 2, "S": 3}
_CODE_POS = {v: k for k, v in _POS_CODE.items()}
_UNTAGGED = 255


class ShardFormatError(HalfpelError, ValueError):
    pass


def shard_name(position: str, qp) -> str:
    if qp is None:
        return f"pairs_{position.lower()}.cnds"
    return f"pairs_{position.lower()}_qp{qp}.cnds"


def encode_shard(pairs, position: str, qp) -> bytes:
    pairs = list(pairs)
    if not pairs:
        raise PreconditionError("cannot write an empty shard")
    ph, pw = pairs[0].input.shape
    sources = list(dict.fromkeys(p.source_id for p in pairs))
    index = {s: i for i, s in enumerate(sources)}
    parts = [
        _SHARD_HEADER.pack(
            SHARD_MAGIC,
            SHARD_VERSION,
            _POS_CODE[position],
            _UNTAGGED if qp is None else qp,
            len(pairs),
            ph,
            pw,
            len(sources),
        )
    ]
    for s in sources:
        raw = s.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(np.array([index[p.source_id] for p in pairs], dtype="<u4").tobytes())
    parts.append(np.stack([p.input for p in pairs]).astype("<f8").tobytes())
    parts.append(np.stack([p.label for p in pairs]).astype("<f8").tobytes())
    return b"".join(parts)


def decode_shard(data: bytes, source="<bytes>"):
    if len(data) < _SHARD_HEADER.size:
        raise ShardFormatError(f"{source}: too short for a shard header")
    magic, version, pos_code, qp_code, count, ph, pw, nsrc = _SHARD_HEADER.unpack_from(data)
    if magic != SHARD_MAGIC:
        raise ShardFormatError(f"{source}: bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise ShardFormatError(f"{source}: unsupported version {version}")
    if pos_code not in _CODE_POS:
        raise ShardFormatError(f"{source}: unknown position code {pos_code}")
    position = _CODE_POS[pos_code]
    qp = None if qp_code == _UNTAGGED else qp_code
    off = _SHARD_HEADER.size
    sources = []
    try:
        for _ in range(nsrc):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            sources.append(data[off : off + n].decode("utf-8"))
            off += n
    except struct.error:
        raise ShardFormatError(f"{source}: truncated source table") from None
    need = 4 * count + 16 * count * ph * pw
    if len(data) - off != need:
        raise ShardFormatError(f"{source}: expected {need} payload bytes, found {len(data) - off}")
    idx = np.frombuffer(data, "<u4", count, off)
    off += 4 * count
    inputs = np.frombuffer(data, "<f8", count * ph * pw, off).reshape(count, ph, pw)
    off += 8 * count * ph * pw
    labels = np.frombuffer(data, "<f8", count * ph * pw, off).reshape(count, ph, pw)
    return [
        TrainingPair(inputs[i].astype(np.float64), labels[i].astype(np.float64), position, qp, sources[idx[i]])
        for i in range(count)
    ]


def write_shard(path, pairs, position: str, qp) -> None:
    Path(path).write_bytes(encode_shard(pairs, position, qp))


def read_shard(path):
    return decode_shard(Path(path).read_bytes(), source=str(path))


REPORT_NAME = "build_report.csv"


def write_dataset(ds: Dataset, out_dir) -> list:
    """Write one shard per collection plus the CSV build report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (pos, qp), pairs in ds.pairs.items():
        path = out_dir / shard_name(pos, qp)
        write_shard(path, pairs, pos, qp)
        written.append(path)
    with open(out_dir / REPORT_NAME, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["position", "qp", "pairs", "sources"])
        writer.writeheader()
        writer.writerows(ds.report_rows())
    return written
