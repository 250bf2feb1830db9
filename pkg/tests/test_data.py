import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgqr import data as D
from cgqr.errors import ConfigError, PreconditionError, ShapeError
from oracles import boundary_oracle


def _raw(pid, frame=None, phase="NONE", size=8, fill=1):
    mask = np.zeros((size, size), dtype=np.int64)
    mask[2:5, 2:5] = fill
    return D.RawSample(np.random.rand(size, size), mask, pid, phase=phase, frame=frame)


# -- normalize_image ---------------------------------------------------------

def test_normalize_constant_is_zero():
    out = D.normalize_image(np.full((5, 7), 7.0))
    assert out.shape == (5, 7)
    assert np.all(out == 0)


def test_normalize_two_pixels():
    out = D.normalize_image(np.array([[0.0, 2.0]]))
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-5)


def test_normalize_random_moments():
    out = D.normalize_image(np.random.default_rng(0).random((64, 64)))
    assert abs(out.mean()) < 1e-6
    assert 1 - 1e-4 <= out.std() <= 1


def test_normalize_empty_raises():
    with pytest.raises(PreconditionError):
        D.normalize_image(np.zeros((0, 4)))


# -- resize_pair ---------------------------------------------------------------

def test_resize_mask_block_replication():
    mask = np.array([[0, 1], [2, 3]])
    _, out = D.resize_pair(np.zeros((2, 2)), mask, (4, 4))
    expected = np.kron(mask, np.ones((2, 2), dtype=int))
    np.testing.assert_array_equal(out, expected)


def test_resize_identity_is_bit_identical():
    rng = np.random.default_rng(1)
    img, mask = rng.random((9, 13)), rng.integers(0, 4, (9, 13))
    a, b = D.resize_pair(img, mask, (9, 13))
    assert a.tobytes() == img.tobytes()
    np.testing.assert_array_equal(b, mask)


@given(st.floats(-100, 100, allow_nan=False), st.integers(1, 40), st.integers(1, 40))
@settings(max_examples=40, deadline=None)
def test_resize_constant_stays_constant(c, h, w):
    img, _ = D.resize_pair(np.full((7, 5), c), np.zeros((7, 5), int), (h, w))
    assert img.shape == (h, w)
    assert np.all(img == c)


@given(st.integers(0, 2**31 - 1), st.integers(1, 30), st.integers(1, 30))
@settings(max_examples=40, deadline=None)
def test_resize_mask_labels_subset(seed, h, w):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, 5, size=tuple(rng.integers(1, 12, 2)))
    _, out = D.resize_pair(np.zeros(mask.shape), mask, (h, w))
    assert set(np.unique(out)) <= set(np.unique(mask))


def test_resize_mismatched_shapes():
    with pytest.raises(ShapeError):
        D.resize_pair(np.zeros((4, 4)), np.zeros((4, 5), int), (8, 8))


# -- make_boundary_target ----------------------------------------------------

def test_boundary_all_background():
    assert not D.make_boundary_target(np.zeros((8, 8), int)).any()


def test_boundary_block_matches_enumeration():
    mask = np.zeros((8, 8), int)
    mask[2:6, 2:6] = 1
    out = D.make_boundary_target(mask)
    np.testing.assert_array_equal(out, boundary_oracle(mask))
    # 12-pixel inner ring plus 16 outside neighbours across the transition
    assert int(out.sum()) == 28


def test_boundary_full_frame_single_class():
    # replicate padding: the frame edge is not a class transition
    assert not D.make_boundary_target(np.ones((8, 8), int)).any()


def test_boundary_bad_thickness():
    with pytest.raises(ConfigError):
        D.make_boundary_target(np.zeros((4, 4), int), thickness=0)


@pytest.mark.parametrize("thickness", [1, 2])
def test_boundary_random_family_equals_oracle(thickness):
    rng = np.random.default_rng(2024)
    for _ in range(60):
        n_labels = int(rng.integers(2, 5))
        mask = rng.integers(0, n_labels, (8, 8))
        if rng.random() < 0.5:  # blockier masks as well as salt-and-pepper
            mask = np.kron(rng.integers(0, n_labels, (4, 4)), np.ones((2, 2), int))
        np.testing.assert_array_equal(D.make_boundary_target(mask, thickness), boundary_oracle(mask, thickness))


# -- preprocess --------------------------------------------------------------

def test_preprocess_shapes_and_standardization(synth_raw):
    s = D.preprocess(synth_raw[0], (48, 40))
    assert s.image.shape == s.mask.shape == s.boundary.shape == (48, 40)
    assert s.image.dtype == np.float32
    assert abs(float(s.image.mean())) < 1e-4
    assert abs(float(s.image.std()) - 1) < 1e-3
    assert set(np.unique(s.boundary)) <= {0, 1}


# -- split_by_patient ----------------------------------------------------------

def _patients(n, frames=2):
    return [_raw(f"p{i:02d}", frame=f) for i in range(n) for f in range(frames)]


def test_split_counts():
    split = D.split_by_patient(_patients(10), 0.8, 0)
    assert len({s.patient_id for s in split.train}) == 8
    assert len({s.patient_id for s in split.val}) == 2


def test_split_deterministic():
    a = D.split_by_patient(_patients(10), 0.8, 5)
    b = D.split_by_patient(_patients(10), 0.8, 5)
    assert [s.sample_id for s in a.train] == [s.sample_id for s in b.train]
    assert [s.sample_id for s in a.val] == [s.sample_id for s in b.val]


def test_split_half_keeps_patients_whole():
    samples = _patients(4, frames=3)
    split = D.split_by_patient(samples, 0.5, 1)
    tr = {s.patient_id for s in split.train}
    va = {s.patient_id for s in split.val}
    assert not tr & va and len(tr) == len(va) == 2
    assert len(split.train) + len(split.val) == len(samples)


@given(st.integers(0, 10_000), st.integers(2, 12), st.floats(0.05, 0.95))
@settings(max_examples=150, deadline=None)
def test_split_disjoint_for_all_seeds(seed, n, ratio):
    samples = _patients(n)
    split = D.split_by_patient(samples, ratio, seed)
    tr = {s.patient_id for s in split.train}
    va = {s.patient_id for s in split.val}
    assert not tr & va
    assert tr | va == {s.patient_id for s in samples}
    assert len(tr) == min(max(int(np.floor(ratio * n + 0.5)), 1), n - 1)


def test_split_single_patient_raises():
    with pytest.raises(PreconditionError):
        D.split_by_patient(_patients(1, frames=4), 0.8, 0)


def test_split_bad_ratio():
    with pytest.raises(ConfigError):
        D.split_by_patient(_patients(3), 1.0, 0)


# -- extract_frames ------------------------------------------------------------

def test_extract_frames_counts():
    seq = [_raw("a", frame=i, fill=0 if i in (1, 3) else 1) for i in range(5)]
    assert len(D.extract_frames(seq)) == 5
    assert len(D.extract_frames(seq, drop_empty=True)) == 3
    assert D.extract_frames([]) == []


# -- synthetic generator -------------------------------------------------------

def test_synthetic_deterministic():
    cfg = D.SynthConfig(n_patients=2, frames_per_patient=2, seed=1)
    a, b = D.generate_synthetic(cfg), D.generate_synthetic(cfg)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()


def test_synthetic_noiseless_is_piecewise_constant():
    cfg = D.SynthConfig(n_patients=2, frames_per_patient=2, noise_level=0.0, contrast=1.0, seed=4)
    for s in D.generate_synthetic(cfg):
        labels = np.unique(s.mask)
        levels = {}
        for k in labels:
            vals = np.unique(s.image[s.mask == k])
            assert len(vals) == 1, f"class {k} is not constant"
            levels[int(k)] = float(vals[0])
        assert len(set(levels.values())) == len(levels)


def test_synthetic_classes_disjoint_and_present():
    cfg = D.SynthConfig(n_patients=3, frames_per_patient=2, n_classes=4, seed=2)
    for s in D.generate_synthetic(cfg):
        assert set(np.unique(s.mask)) == {0, 1, 2, 3, 4}


def test_synthetic_domain_shift_changes_images_only():
    base = D.SynthConfig(n_patients=2, frames_per_patient=2, seed=9)
    shifted = D.SynthConfig(n_patients=2, frames_per_patient=2, seed=9, domain_shift=0.5)
    for a, b in zip(D.generate_synthetic(base), D.generate_synthetic(shifted)):
        np.testing.assert_array_equal(a.mask, b.mask)
        assert not np.array_equal(a.image, b.image)


def test_synthetic_unplaceable_raises():
    with pytest.raises(ConfigError):
        D.generate_synthetic(D.SynthConfig(n_patients=1, frames_per_patient=1, n_classes=40, image_size=(32, 32)))


@pytest.mark.parametrize("kwargs", [dict(n_classes=0), dict(image_size=(16, 64)), dict(contrast=0.0),
                                    dict(noise_level=-1.0), dict(domain_shift=-0.1)])
def test_synth_config_validation(kwargs):
    with pytest.raises(ConfigError):
        D.SynthConfig(**kwargs)


# -- dataset IO ----------------------------------------------------------------

def test_dataset_roundtrip(tmp_path, monkeypatch):
    cfg = D.SynthConfig(n_patients=3, frames_per_patient=2, seed=5)
    D.write_synthetic(cfg, tmp_path, tag="domainA")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["patients"] == ["patient0000", "patient0001", "patient0002"]
    assert manifest["tag"] == "domainA" and manifest["seed"] == 5
    monkeypatch.setenv("CGQR_NUM_WORKERS", "3")
    loaded = D.load_dataset(tmp_path)
    monkeypatch.setenv("CGQR_NUM_WORKERS", "1")
    again = D.load_dataset(tmp_path)
    assert [s.sample_id for s in loaded] == [s.sample_id for s in again]
    original = D.generate_synthetic(cfg)
    assert sorted(s.sample_id for s in original) == [s.sample_id for s in loaded]
    by_id = {s.sample_id: s for s in original}
    for s in loaded:
        np.testing.assert_array_equal(s.mask, by_id[s.sample_id].mask)
        assert s.image.shape == (64, 64)


def test_raw_sample_validation():
    with pytest.raises(ShapeError):
        D.RawSample(np.zeros((4, 4)), np.zeros((4, 5), int), "p")
    with pytest.raises(ConfigError):
        D.RawSample(np.zeros((4, 4)), np.zeros((4, 4), int), "p", phase="MID")
