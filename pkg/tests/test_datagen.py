import numpy as np
import pytest

from halfpel.datagen import (
    MODEL_QPS,
    DatasetManifest,
    ShardFormatError,
    TrainingPair,
    build_dataset,
    decode_shard,
    encode_shard,
    format_manifest,
    parse_manifest,
    patch_grid,
    read_shard,
    select_model_qp,
    shard_name,
    split_train_val,
    sr_training_planes,
    write_dataset,
)
from halfpel.errors import ConfigError, PreconditionError
from halfpel.image_core import (
    DEFAULT_BLUR,
    BlurKernel,
    blur,
    crop_even,
    degrade_intra_surrogate,
    extract_phases,
    interleave_phases,
    load_pgm,
    qstep,
    save_pgm,
)

from .conftest import smooth_image


@pytest.fixture
def one_image(tmp_path):
    path = tmp_path / "one.pgm"
    save_pgm(smooth_image(0, 64), path)
    return path


def test_counting_example(one_image):
    m = DatasetManifest([str(one_image)], patch_size=32, stride=32)
    ds = build_dataset(m)
    assert len(ds.pairs) == 12
    assert sum(len(v) for v in ds.pairs.values()) == 12
    assert set(ds.pairs) == {(p, q) for p in "HVD" for q in MODEL_QPS}


def test_pair_tags_and_phases(one_image):
    m = DatasetManifest([str(one_image)], patch_size=16, stride=8)
    ds = build_dataset(m)
    phases = extract_phases(blur(crop_even(load_pgm(one_image))))
    grid = patch_grid(32, 32, 16, 8)
    for (pos, qp), pairs in ds.pairs.items():
        label_plane = {"H": phases.b, "V": phases.h, "D": phases.j}[pos]
        degraded = degrade_intra_surrogate(phases.a, qp)
        assert len(pairs) == len(grid)
        for pair, (y, x) in zip(pairs, grid):
            assert pair.position == pos and pair.qp == qp
            assert pair.input.shape == pair.label.shape == (16, 16)
            # labels stay clean; only the integer phase is degraded (whole plane, then patched)
            assert np.array_equal(pair.label, label_plane[y : y + 16, x : x + 16])
            assert np.array_equal(pair.input, degraded[y : y + 16, x : x + 16])


def test_undegraded_pairs_interleave_to_blurred_crop(one_image):
    m = DatasetManifest([str(one_image)], patch_size=16, stride=16, qps=(22,), degrade=False)
    ds = build_dataset(m)
    blurred = blur(crop_even(load_pgm(one_image)))
    for i, (y, x) in enumerate(patch_grid(32, 32, 16, 16)):
        a = ds.pairs[("H", 22)][i].input
        b, h, j = (ds.pairs[(p, 22)][i].label for p in "HVD")
        crop = blurred[2 * y : 2 * y + 32, 2 * x : 2 * x + 32]
        assert np.array_equal(interleave_phases((a, b, h, j)), crop)


def test_constant_white_corpus(tmp_path):
    path = tmp_path / "white.pgm"
    save_pgm(np.full((64, 64), 255.0), path)
    ds = build_dataset(DatasetManifest([str(path)], patch_size=32, stride=32))
    for (_, qp), pairs in ds.pairs.items():
        for p in pairs:
            # only the DC level survives; its rounding error is at most step / 2 / 8 per sample
            assert np.all(np.abs(p.input - 255.0) <= qstep(qp) / 16)
            assert np.all(p.label == 255.0)


def test_odd_image_cropped(tmp_path):
    path = tmp_path / "odd.pgm"
    save_pgm(smooth_image(1, 67)[:, :65], path)
    ds = build_dataset(DatasetManifest([str(path)], patch_size=32, stride=32, qps=(22,)))
    assert len(ds.pairs[("H", 22)]) == 1


def test_missing_source(tmp_path):
    with pytest.raises(ConfigError, match="nothere.pgm"):
        build_dataset(DatasetManifest([str(tmp_path / "nothere.pgm")]))


def test_too_small_source(tmp_path):
    path = tmp_path / "tiny.pgm"
    save_pgm(np.zeros((20, 20)), path)
    with pytest.raises(ConfigError):
        build_dataset(DatasetManifest([str(path)]))


def test_manifest_validation():
    with pytest.raises(ConfigError):
        DatasetManifest([])
    with pytest.raises(ConfigError):
        DatasetManifest(["a"], qps=(23,))
    with pytest.raises(ConfigError):
        DatasetManifest(["a"], split_fraction=1.0)
    with pytest.raises(ConfigError):
        DatasetManifest(["a", "a"])


def test_manifest_file_round_trip(tmp_path):
    for i in range(3):
        save_pgm(smooth_image(i, 40), tmp_path / f"im{i}.pgm")
    text = "# corpus\nsources = im*.pgm\nqps=22,37\npatch-size=16  # dash form accepted\nblur_sigma=1.0\nsr_pairs=yes\n"
    (tmp_path / "m.txt").write_text(text)
    m = parse_manifest(tmp_path / "m.txt")
    assert m.sources == [str(tmp_path / f"im{i}.pgm") for i in range(3)]
    assert m.qps == (22, 37) and m.patch_size == 16 and m.sr_pairs
    assert m.blur == BlurKernel.gaussian(1.0)
    (tmp_path / "m2.txt").write_text(format_manifest(m))
    assert parse_manifest(tmp_path / "m2.txt") == m


@pytest.mark.parametrize(
    "text", ["qps=22\n", "sources=a.pgm\nbogus=1\n", "sources=a.pgm\nblur_taps=0.5,0.5\n", "sources=a.pgm\nstride=x\n"]
)
def test_bad_manifest(tmp_path, text):
    (tmp_path / "m.txt").write_text(text)
    with pytest.raises(ConfigError):
        parse_manifest(tmp_path / "m.txt")


def test_build_is_deterministic_and_parallel_safe(tmp_path):
    paths = []
    for i in range(4):
        paths.append(str(tmp_path / f"s{i}.pgm"))
        save_pgm(smooth_image(i, 64), paths[-1])
    m = DatasetManifest(paths, qps=(27,), patch_size=16, stride=16)
    a = build_dataset(m, workers=1)
    b = build_dataset(m, workers=4)
    for key in a.pairs:
        assert encode_shard(a.pairs[key], *key) == encode_shard(b.pairs[key], *key)


def test_sr_pairs(one_image):
    ds = build_dataset(DatasetManifest([str(one_image)], qps=(22,), patch_size=32, stride=32, sr_pairs=True))
    sr = ds.pairs[("S", None)]
    hr = blur(crop_even(load_pgm(one_image)))
    inp, label = sr_training_planes(hr)
    assert len(sr) == 4
    assert np.array_equal(sr[0].label, hr[:32, :32])
    assert np.array_equal(sr[3].input, inp[32:, 32:])
    assert np.array_equal(label, hr)


# --- split -------------------------------------------------------------------


def _fake_pairs(n_sources, per=3):
    z = np.zeros((2, 2))
    return [TrainingPair(z, z, "H", 22, f"src{s}") for s in range(n_sources) for _ in range(per)]


def test_split_counts_and_partition():
    pairs = _fake_pairs(10)
    train, val = split_train_val(pairs, 0.8, seed=5)
    assert len({p.source_id for p in train}) == 8
    assert len({p.source_id for p in val}) == 2
    assert {p.source_id for p in train}.isdisjoint({p.source_id for p in val})
    assert sorted(map(id, train + val)) == sorted(map(id, pairs))
    again = split_train_val(pairs, 0.8, seed=5)
    assert [p.source_id for p in again[0]] == [p.source_id for p in train]


def test_split_keeps_both_sides_nonempty():
    train, val = split_train_val(_fake_pairs(2), 0.99, 0)
    assert train and val
    with pytest.raises(PreconditionError):
        split_train_val(_fake_pairs(1), 0.5, 0)


# --- model QP selection ------------------------------------------------------


@pytest.mark.parametrize("qp,model", [(30, 32), (22, 22), (24, 22), (0, 22), (51, 37), (35, 37), (34, 32)])
def test_select_model_qp(qp, model):
    assert select_model_qp(qp) == model


def test_select_model_qp_range():
    with pytest.raises(PreconditionError):
        select_model_qp(52)


# --- shards ------------------------------------------------------------------


def test_shard_round_trip(tmp_path):
    r = np.random.default_rng(0)
    pairs = [TrainingPair(r.normal(size=(4, 5)), r.normal(size=(4, 5)), "D", 32, f"s{i % 2}") for i in range(3)]
    path = tmp_path / shard_name("D", 32)
    path.write_bytes(encode_shard(pairs, "D", 32))
    back = read_shard(path)
    assert path.name == "pairs_d_qp32.cnds"
    for a, b in zip(pairs, back):
        assert np.array_equal(a.input, b.input) and np.array_equal(a.label, b.label)
        assert (a.position, a.qp, a.source_id) == (b.position, b.qp, b.source_id)
    assert shard_name("S", None) == "pairs_s.cnds"


def test_shard_errors():
    z = np.zeros((2, 2))
    data = encode_shard([TrainingPair(z, z, "H", 22, "a")], "H", 22)
    with pytest.raises(ShardFormatError):
        decode_shard(data[:-1])
    with pytest.raises(ShardFormatError):
        decode_shard(b"NOPE" + data[4:])
    with pytest.raises(ShardFormatError):
        decode_shard(data[:10])
    with pytest.raises(PreconditionError):
        encode_shard([], "H", 22)


def test_write_dataset(one_image, tmp_path):
    ds = build_dataset(DatasetManifest([str(one_image)], patch_size=32, stride=32))
    out = tmp_path / "out"
    written = write_dataset(ds, out)
    assert len(written) == 12
    lines = (out / "build_report.csv").read_text().splitlines()
    assert lines[0] == "position,qp,pairs,sources" and len(lines) == 13


def test_blur_kernel_in_manifest_is_used(one_image):
    k = BlurKernel((0.25, 0.5, 0.25))
    a = build_dataset(DatasetManifest([str(one_image)], blur=k, qps=(22,), degrade=False))
    b = build_dataset(DatasetManifest([str(one_image)], blur=DEFAULT_BLUR, qps=(22,), degrade=False))
    assert not np.array_equal(a.pairs[("H", 22)][0].label, b.pairs[("H", 22)][0].label)
