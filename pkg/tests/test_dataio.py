import gzip
import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objqa import dataio
from objqa.dataio import DegradationSpec
from objqa.errors import ConsistencyError, FormatError, ParameterError


# ---------------------------------------------------------------- IDX

def _write_pair(tmp_path, n=5, gz=False):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
    labs = rng.integers(0, 10, n)
    ip, lp = tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte"
    dataio.write_idx(imgs, labs, ip, lp)
    if gz:
        for p in (ip, lp):
            (p.parent / (p.name + ".gz")).write_bytes(gzip.compress(p.read_bytes()))
            p.unlink()
        ip, lp = ip.parent / (ip.name + ".gz"), lp.parent / (lp.name + ".gz")
    return imgs, labs, ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    imgs, labs, ip, lp = _write_pair(tmp_path, gz=gz)
    out = dataio.load_idx(ip, lp)
    assert len(out) == 5
    assert all(np.array_equal(a, b) and la == lb for (a, la), b, lb in zip(out, imgs, labs))
    assert dataio.find_idx(tmp_path) == (ip, lp)


def test_idx_header_is_big_endian(tmp_path):
    _, _, ip, _ = _write_pair(tmp_path, n=3)
    assert struct.unpack(">IIII", ip.read_bytes()[:16]) == (2051, 3, 28, 28)


def test_idx_empty_file(tmp_path):
    _, _, ip, lp = _write_pair(tmp_path)
    ip.write_bytes(b"")
    with pytest.raises(OSError):
        dataio.load_idx(ip, lp)


def test_idx_swapped_paths(tmp_path):
    _, _, ip, lp = _write_pair(tmp_path)
    with pytest.raises(FormatError):
        dataio.load_idx(lp, ip)


def test_idx_count_mismatch(tmp_path):
    imgs, labs, ip, lp = _write_pair(tmp_path)
    dataio.write_idx(imgs, labs[:4], tmp_path / "i", lp)
    with pytest.raises(ConsistencyError):
        dataio.load_idx(ip, lp)


def test_idx_truncated(tmp_path):
    _, _, ip, lp = _write_pair(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(OSError):
        dataio.load_idx(ip, lp)


def test_find_idx_missing(tmp_path):
    assert dataio.find_idx(tmp_path) is None
    assert dataio.find_idx("") is None


# ---------------------------------------------------------------- blur

def _blur_oracle(img, k):
    """Direct 2-D convolution with the outer-product kernel, clamp-to-edge."""
    sigma = k / 6.0
    r = k // 2
    ax = np.arange(-r, r + 1)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    h, w = img.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    acc += g[dy + r, dx + r] * img[yy, xx]
            out[y, x] = acc
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def test_blur_constant_image():
    img = np.full((12, 12), 77, np.uint8)
    for k in dataio.BLUR_KERNELS:
        assert np.array_equal(dataio.gaussian_blur(img, k), img)


def test_blur_impulse_matches_kernel():
    img = np.zeros((9, 9), np.uint8)
    img[4, 4] = 255
    out = dataio.gaussian_blur(img, 3)
    g = np.exp(-np.array([1.0, 0.0, 1.0]) ** 2 / (2 * 0.5 ** 2))
    g /= g.sum()
    expected = np.floor(np.outer(g, g) * 255 + 0.5)
    assert np.array_equal(out[3:6, 3:6], expected)
    assert out.sum() == expected.sum()


@pytest.mark.parametrize("k", [3, 7, 11])
def test_blur_matches_direct_convolution(k):
    img = np.random.default_rng(k).integers(0, 256, (14, 11)).astype(np.uint8)
    got = dataio.gaussian_blur(img, k)
    want = _blur_oracle(img, k)
    # separable vs direct summation may differ in the last bit before rounding
    assert np.abs(got.astype(int) - want.astype(int)).max() <= 1
    assert np.mean(got == want) > 0.99


def test_blur_large_kernel_lowers_variance(digits):
    images, _ = digits
    for img in images[:20]:
        assert dataio.gaussian_blur(img, 19).var() < dataio.gaussian_blur(img, 3).var()


@pytest.mark.parametrize("k", [0, 1, 2, 4, 21, 18])
def test_blur_bad_kernel(k):
    with pytest.raises(ParameterError):
        dataio.gaussian_blur(np.zeros((5, 5), np.uint8), k)


# ---------------------------------------------------------------- illumination

def test_illumination_identity():
    img = np.arange(256, dtype=np.uint8).reshape(16, 16)
    assert np.array_equal(dataio.adjust_illumination(img, 1.0, 0.0, check_range=False), img)


def test_illumination_clamps():
    assert dataio.adjust_illumination(np.array([[128]], np.uint8), 0.9, 250)[0, 0] == 255
    assert dataio.adjust_illumination(np.array([[100]], np.uint8), 0.4, -160)[0, 0] == 0


def test_illumination_rounding():
    # 0.5 * 3 + 0 = 1.5 rounds half up to 2
    assert dataio.adjust_illumination(np.array([[3]], np.uint8), 0.5, 0.0)[0, 0] == 2


@pytest.mark.parametrize("c,i", [(0.3, 0.0), (0.95, 0.0), (0.5, -161.0), (0.5, 251.0)])
def test_illumination_out_of_range(c, i):
    with pytest.raises(ParameterError):
        dataio.adjust_illumination(np.zeros((2, 2), np.uint8), c, i)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(dataio.KINDS))
def test_degradations_stay_in_range(seed, kind):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (10, 10)).astype(np.uint8)
    for spec in dataio.degradation_specs(kind, rng):
        out = dataio.apply_spec(img, spec)
        assert out.dtype == np.uint8 and out.shape == img.shape


def test_spec_validation():
    with pytest.raises(ParameterError):
        DegradationSpec("Blur")
    with pytest.raises(ParameterError):
        DegradationSpec("Blur", kernel=3, contrast=0.5, intensity=0.0)
    with pytest.raises(ParameterError):
        DegradationSpec("Mixed", kernel=3)
    with pytest.raises(ParameterError):
        DegradationSpec("Noise", kernel=3)


# ---------------------------------------------------------------- synthesis

def test_synth_one_image_blur_ladder(digits):
    images, labels = digits
    out = dataio.synth_dataset([(images[0], labels[0])], "Blur", seed=0)
    assert [s.spec.kernel for s in out] == list(range(3, 20, 2))
    assert all(s.label == labels[0] and s.clean_id == 0 for s in out)


def test_synth_empty():
    with pytest.raises(ParameterError):
        dataio.synth_dataset([], "Blur", 0)


@pytest.mark.parametrize("kind", dataio.KINDS)
def test_synth_counts_and_determinism(digits, kind):
    images, labels = digits
    clean = list(zip(images[:12], labels[:12]))
    a = dataio.synth_dataset(clean, kind, seed=3)
    b = dataio.synth_dataset(clean, kind, seed=3)
    assert len(a) == 9 * 12
    assert [s.sample_id for s in a] == list(range(len(a)))
    assert dataio.manifest_csv(a) == dataio.manifest_csv(b)
    assert np.stack([s.image for s in a]).tobytes() == np.stack([s.image for s in b]).tobytes()


def test_illumination_picks_distinct_grid_points():
    specs = dataio.degradation_specs("Illumination", np.random.default_rng(0))
    pairs = {(s.contrast, s.intensity) for s in specs}
    assert len(pairs) == 9
    assert all(c in dataio.CONTRAST_GRID and i in dataio.INTENSITY_GRID for c, i in pairs)


def test_procedural_digits_balanced_and_seeded():
    a = dataio.procedural_digits(40, seed=5)
    b = dataio.procedural_digits(40, seed=5)
    assert np.bincount([lab for _, lab in a], minlength=10).tolist() == [4] * 10
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))
    assert all(img.shape == (28, 28) and img.dtype == np.uint8 and img.max() > 100 for img, _ in a)


# ---------------------------------------------------------------- ground truth

def test_gt_from_features_examples():
    f = np.array([[1.0, 2.0, -0.5]])
    assert dataio.gt_from_features(f, f)[0] == pytest.approx(1.0, abs=1e-15)
    assert dataio.gt_from_features(f, -f)[0] == pytest.approx(0.0, abs=1e-15)
    assert dataio.gt_from_features(f, np.zeros_like(f))[0] == 0.5


def test_ground_truth_clean_copy_is_one(digits, small_extractor):
    images, labels = digits
    sample = dataio.LabeledSample(0, images[0], int(labels[0]), 0, DegradationSpec("Blur", kernel=3))
    out = dataio.make_ground_truth([sample], images[:1], small_extractor)
    assert out[0].gt_score == pytest.approx(1.0, abs=1e-12)


def test_ground_truth_missing_source(digits, small_extractor):
    images, labels = digits
    sample = dataio.LabeledSample(0, images[0], int(labels[0]), 5, DegradationSpec("Blur", kernel=3))
    with pytest.raises(ConsistencyError):
        dataio.make_ground_truth([sample], images[:2], small_extractor)


def test_blur_ladder_gt_mostly_non_increasing(digits, small_extractor):
    images, labels = digits
    clean = list(zip(images[:60], labels[:60]))
    samples = dataio.make_ground_truth(dataio.synth_dataset(clean, "Blur", 0), images[:60], small_extractor)
    gt = np.array([s.gt_score for s in samples]).reshape(60, 9)
    frac = np.mean([np.all(np.diff(row) <= 0) for row in gt])
    assert frac >= 0.9, frac


# ---------------------------------------------------------------- splits, groups, triplets

@given(st.lists(st.integers(0, 9), min_size=2, max_size=200), st.integers(0, 1000))
def test_split_is_partition(labels, seed):
    train, test = dataio.split_train_test(labels, seed)
    assert set(train).isdisjoint(test)
    assert sorted(set(train) | set(test)) == list(range(len(labels)))


def _fake_samples(rng, n):
    labels = rng.integers(0, 10, n)
    return [dataio.LabeledSample(i, None, int(lab), i, DegradationSpec("Blur", kernel=3), float(rng.random()))
            for i, lab in enumerate(labels)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["Intra", "Inter"]))
def test_group_invariants(seed, kind):
    rng = np.random.default_rng(seed)
    samples = _fake_samples(rng, int(rng.integers(40, 200)))
    for g in dataio.build_groups(samples, kind, 30, seed):
        labels = [m.label for m in g.members]
        assert 3 <= len(labels) <= 10
        if kind == "Intra":
            assert len(set(labels)) == 1
        else:
            assert len(set(labels)) == len(labels)
        assert len({m.sample_id for m in g.members}) == len(labels)


def test_group_sample_validation():
    s = _fake_samples(np.random.default_rng(0), 30)
    same = [x for x in s if x.label == s[0].label]
    with pytest.raises(ParameterError):
        dataio.GroupSample(s[:2], "Inter")
    with pytest.raises(ConsistencyError):
        dataio.GroupSample([s[0], s[0], s[0]], "Inter")
    if len(same) >= 3:
        dataio.GroupSample(same[:3], "Intra")


def test_groups_infeasible():
    s = [dataio.LabeledSample(i, None, i % 2, i, DegradationSpec("Blur", kernel=3), 0.5) for i in range(10)]
    with pytest.raises(ParameterError):
        dataio.build_groups(s, "Inter", 5, 0)


def test_triplets_same_class_distinct(caplog):
    labels = np.array([0] * 5 + [1] * 2 + [2] * 4)
    with caplog.at_level(logging.WARNING):
        tb = dataio.sample_triplets(labels, 64, seed=1, n_batches=3)
    assert tb.skipped_classes == 1
    assert "skipped 1" in caplog.text
    for b in tb.batches:
        assert b.shape == (64, 3)
        assert np.all(labels[b] == labels[b[:, :1]])
        assert np.all((b[:, 0] != b[:, 1]) & (b[:, 0] != b[:, 2]) & (b[:, 1] != b[:, 2]))
        assert not np.any(labels[b] == 1)


def test_triplets_all_classes_small():
    tb = dataio.sample_triplets([0, 0, 1, 1], 8, 0)
    assert tb.batches == [] and tb.skipped_classes == 2


# ---------------------------------------------------------------- files

def test_oqai_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (7, 28, 20), dtype=np.uint8)
    dataio.write_oqai(tmp_path / "x.oqai", imgs)
    raw = (tmp_path / "x.oqai").read_bytes()
    assert raw[:4] == b"OQAI" and struct.unpack("<IBB", raw[4:10]) == (7, 20, 28)
    assert np.array_equal(dataio.read_oqai(tmp_path / "x.oqai"), imgs)
    assert not list(tmp_path.glob("*.tmp"))


def test_oqai_errors(tmp_path):
    p = tmp_path / "x.oqai"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(FormatError):
        dataio.read_oqai(p)
    dataio.write_oqai(p, np.zeros((2, 4, 4), np.uint8))
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(OSError):
        dataio.read_oqai(p)


def test_manifest_round_trip(tmp_path, digits):
    images, labels = digits
    samples = dataio.synth_dataset(list(zip(images[:3], labels[:3])), "Mixed", 0)
    samples = [dataio.LabeledSample(s.sample_id, s.image, s.label, s.clean_id, s.spec, 0.1 + s.sample_id / 7)
               for s in samples]
    dataio.write_manifest(tmp_path / "m.csv", samples)
    back = dataio.read_manifest(tmp_path / "m.csv", np.stack([s.image for s in samples]))
    assert [(s.sample_id, s.label, s.clean_id, s.spec, s.gt_score) for s in back] == \
           [(s.sample_id, s.label, s.clean_id, s.spec, s.gt_score) for s in samples]


def test_manifest_missing_image(tmp_path, digits):
    images, labels = digits
    samples = dataio.synth_dataset(list(zip(images[:1], labels[:1])), "Blur", 0)
    dataio.write_manifest(tmp_path / "m.csv", samples)
    with pytest.raises(ConsistencyError):
        dataio.read_manifest(tmp_path / "m.csv", np.stack([s.image for s in samples[:4]]))
