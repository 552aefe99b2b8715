import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmmna.data import (DAYS_PER_MONTH, PhantomSpec, Subject, SurvivalClass, augment, augment_arrays,
                        bin_survival, decode_tensor, encode_tensor, flip, generate_phantoms,
                        nearest_indices, read_dataset, read_tensor, resample_mask, resample_volume,
                        rotate90, split_folds, stack_subjects, write_dataset, write_tensor)
from mmmna.errors import ConfigError, ContractError, DimensionError, ParseError
from mmmna.fusion import MODALITIES

SMALL = PhantomSpec(seed=4, n_subjects=3, shape=(8, 10, 10))


def _bytes(subjects):
    return b"".join(getattr(s, m).tobytes() for s in subjects for m in MODALITIES + ("seg",)) + \
        repr([(s.id, s.age, s.survival_days) for s in subjects]).encode()


# -- phantoms --------------------------------------------------------------

def test_phantoms_deterministic():
    assert _bytes(generate_phantoms(SMALL)) == _bytes(generate_phantoms(SMALL))
    other = PhantomSpec(seed=5, n_subjects=3, shape=(8, 10, 10))
    assert _bytes(generate_phantoms(other)) != _bytes(generate_phantoms(SMALL))


def test_phantom_structure():
    for s in generate_phantoms(PhantomSpec(seed=1, n_subjects=12, shape=(16, 16, 16))):
        assert set(np.unique(s.seg)) <= {0, 1, 2, 4} and (s.seg > 0).any()
        assert s.flair.shape == s.seg.shape == (16, 16, 16)
        brain = s.flair != 0
        assert np.all(brain[s.seg > 0]) and brain.mean() < 0.9
        assert not np.array_equal(s.flair, s.t1)
        # modalities share the latent anatomy
        assert all(np.array_equal(getattr(s, m) != 0, brain) for m in MODALITIES)
        assert s.survival_days >= 1 and 18 <= s.age <= 95


def test_phantom_class_marginals():
    subs = generate_phantoms(PhantomSpec(seed=0, n_subjects=200, shape=(16, 16, 16)))
    freq = np.bincount([int(s.label) for s in subs], minlength=3) / 200
    target = np.array([0.5, 0.3, 0.2])
    assert np.all(np.abs(freq - target) <= 0.2 * target)


def test_phantom_signal_is_learnable():
    # the latent rule: larger tumours and older patients survive shorter
    subs = generate_phantoms(PhantomSpec(seed=2, n_subjects=200, shape=(16, 16, 16), class_signal=0.95))
    size = np.array([(s.seg > 0).mean() for s in subs])
    age = np.array([s.age for s in subs])
    label = np.array([int(s.label) for s in subs])
    assert np.corrcoef(size, label)[0, 1] < -0.3
    assert np.corrcoef(age, label)[0, 1] < -0.3


@pytest.mark.parametrize("bad", [dict(n_subjects=0), dict(radius_range=(0.2, 0.6)),
                                 dict(radius_range=(0.3, 0.2)), dict(tumor_count=(0, 2)),
                                 dict(class_signal=1.5), dict(age_share=-0.1), dict(class_weights=(1, 0, 1)), dict(shape=(4, 4))])
def test_phantom_spec_validation(bad):
    with pytest.raises(ConfigError):
        PhantomSpec(**bad)


# -- resampling ------------------------------------------------------------

def test_resample_constant_and_identity(rng):
    out = resample_volume(np.full((4, 5, 6), 2.5), (7, 3, 9))
    assert out.shape == (7, 3, 9)
    np.testing.assert_allclose(out, 2.5, atol=1e-12)
    x = rng.standard_normal((4, 5, 6))
    np.testing.assert_allclose(resample_volume(x, x.shape), x, atol=1e-6)


def test_resample_reproduces_linear_ramp():
    # cubic convolution reproduces linear functions away from the clamped border
    x = np.broadcast_to(np.arange(8, dtype=float)[:, None, None], (8, 4, 4))
    out = resample_volume(x, (16, 4, 4))
    coords = (np.arange(16) + 0.5) * 8 / 16 - 0.5
    np.testing.assert_allclose(out[3:-3, 0, 0], coords[3:-3], atol=1e-12)


def test_nearest_upsample_loop_oracle(rng):
    m = rng.integers(0, 2, size=(3, 4, 5)).astype(np.uint8)
    out = resample_mask(m, (6, 8, 10))
    assert set(np.unique(out)) <= {0, 1}
    for z in range(6):
        for y in range(8):
            for x in range(10):
                src = [min(int((i + 0.5) * s / t), s - 1) for i, s, t in zip((z, y, x), m.shape, out.shape)]
                assert out[z, y, x] == m[tuple(src)]
                # nearest source centre in continuous coordinates
                for i, s, t, j in zip((z, y, x), m.shape, out.shape, src):
                    centre = (i + 0.5) * s / t - 0.5
                    assert abs(centre - j) <= 0.5 + 1e-12


@given(st.integers(0, 2**31), st.tuples(*[st.integers(2, 9)] * 3), st.tuples(*[st.integers(2, 9)] * 3))
def test_resample_mask_never_invents_labels(seed, src, dst):
    m = np.random.default_rng(seed).choice(np.array([0, 1, 2, 4], np.uint8), size=src)
    out = resample_mask(m, dst)
    assert out.shape == dst and set(np.unique(out)) <= set(np.unique(m))


def test_resample_errors():
    with pytest.raises(ContractError):
        resample_volume(np.ones((1, 4, 4)), (2, 4, 4))
    with pytest.raises(ContractError):
        resample_mask(np.ones((4, 4, 4)), (1, 4, 4))
    with pytest.raises(DimensionError):
        resample_volume(np.ones((4, 4, 4)), (4, 4))
    np.testing.assert_array_equal(nearest_indices(2, 4), [0, 0, 1, 1])


# -- survival binning ------------------------------------------------------

def test_bin_survival_examples():
    assert bin_survival(274) == SurvivalClass.SHORT
    assert bin_survival(365) == SurvivalClass.MID
    assert bin_survival(609) == SurvivalClass.LONG
    assert bin_survival(int(10 * DAYS_PER_MONTH)) == SurvivalClass.SHORT
    assert bin_survival(int(np.ceil(15 * DAYS_PER_MONTH))) == SurvivalClass.LONG
    with pytest.raises(ContractError):
        bin_survival(0)


@given(st.integers(1, 5000), st.integers(0, 3000))
def test_bin_survival_monotone(days, extra):
    assert bin_survival(days + extra) >= bin_survival(days)


# -- augmentation ----------------------------------------------------------

def test_augment_identities():
    s = generate_phantoms(SMALL)[0]
    twice = flip(flip(s, 1), 1)
    assert _bytes([twice]) == _bytes([s])
    sq = generate_phantoms(PhantomSpec(seed=2, n_subjects=1, shape=(4, 6, 6)))[0]
    r = sq
    for _ in range(4):
        r = rotate90(r)
    assert _bytes([r]) == _bytes([sq])


@given(st.integers(0, 2**31))
def test_augment_preserves_histograms_and_labels(seed):
    s = generate_phantoms(PhantomSpec(seed=3, n_subjects=1, shape=(4, 6, 6)))[0]
    a = augment(s, seed)
    assert a.label == s.label and a.age == s.age
    np.testing.assert_array_equal(np.bincount(a.seg.ravel(), minlength=5), np.bincount(s.seg.ravel(), minlength=5))
    for m in MODALITIES:
        np.testing.assert_array_equal(np.sort(getattr(a, m).ravel()), np.sort(getattr(s, m).ravel()))
    # one transform for all volumes: brain masks stay aligned with the seg
    assert np.all(a.flair[a.seg > 0] != 0)
    assert _bytes([augment(s, seed)]) == _bytes([a])


def test_augment_arrays_non_square_plane(rng):
    x = rng.standard_normal((2, 3, 4, 6))
    for seed in range(10):
        (out,) = augment_arrays([x], np.random.default_rng(seed))
        assert out.shape == x.shape


# -- folds -----------------------------------------------------------------

def test_fold_sizes():
    split = split_folds([f"s{i}" for i in range(237)], 10, seed=0)
    assert sorted({len(f) for f in split.folds}) == [23, 24]
    assert all(len(f) == 2 for f in split_folds(range(20), 10, seed=1).folds)
    with pytest.raises(ConfigError):
        split_folds(range(5), 6, seed=0)


@given(st.integers(10, 120), st.integers(2, 10), st.integers(0, 2**31))
def test_folds_partition_and_stratify(n, k, seed):
    labels = np.random.default_rng(seed).choice(3, size=n, p=[0.5, 0.3, 0.2])
    ids = [f"id{i}" for i in range(n)]
    split = split_folds(ids, k, seed, labels=labels)
    flat = [i for f in split.folds for i in f]
    assert sorted(flat) == sorted(ids) and len(flat) == len(set(flat))
    sizes = [len(f) for f in split.folds]
    assert max(sizes) - min(sizes) <= 1
    lab = dict(zip(ids, labels))
    for c in range(3):
        per = [sum(lab[i] == c for i in f) for f in split.folds]
        assert max(per) - min(per) <= 1
    assert split.folds == split_folds(ids, k, seed, labels=labels).folds
    assert sorted(split.train_ids(0) + split.folds[0]) == sorted(ids)


# -- files -----------------------------------------------------------------

def test_mmv1_layout():
    arr = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    buf = encode_tensor(arr)
    assert buf[:4] == b"MMV1" and buf[4] == 0 and buf[5] == 3
    assert struct.unpack("<3I", buf[6:18]) == (1, 2, 3)
    assert buf[18:] == arr.astype("<f4").tobytes()
    seg = np.array([[0, 4]], dtype=np.uint8)
    assert encode_tensor(seg)[4] == 1
    np.testing.assert_array_equal(decode_tensor(encode_tensor(seg)), seg)
    with pytest.raises(ContractError):
        encode_tensor(np.arange(3))


@pytest.mark.parametrize("mutate,offset", [(lambda b: b"MMV2" + b[4:], 0), (lambda b: b[:-1], 18),
                                           (lambda b: b[:8], 8), (lambda b: b[:4] + b"\x07" + b[5:], 4)])
def test_mmv1_parse_errors(tmp_path, mutate, offset):
    path = tmp_path / "t.mmv"
    path.write_bytes(mutate(encode_tensor(np.zeros((1, 2, 3), np.float32))))
    with pytest.raises(ParseError) as err:
        read_tensor(path)
    assert err.value.offset == offset and "t.mmv" in str(err.value)


def test_dataset_round_trip_byte_exact(tmp_path):
    subs = generate_phantoms(SMALL)
    write_dataset(subs, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    assert _bytes(back) == _bytes(subs)
    manifest = (tmp_path / "ds" / "manifest.txt").read_text().split()
    assert len(manifest) == len(subs) == len([p for p in (tmp_path / "ds").iterdir() if p.is_dir()])
    write_dataset(back, tmp_path / "again")
    for s in subs:
        for m in MODALITIES + ("seg",):
            a = (tmp_path / "ds" / s.id / f"{m}.mmv").read_bytes()
            assert a == (tmp_path / "again" / s.id / f"{m}.mmv").read_bytes()


def test_dataset_errors(tmp_path):
    with pytest.raises(ParseError):
        read_dataset(tmp_path)
    subs = generate_phantoms(SMALL)
    write_dataset(subs, tmp_path)
    write_tensor(tmp_path / subs[0].id / "t1.mmv", np.zeros((2, 2, 2), np.float32))
    with pytest.raises(ParseError):
        read_dataset(tmp_path)
    (tmp_path / subs[1].id / "meta.txt").write_text("id=x\n")
    with pytest.raises(ParseError):
        read_dataset(tmp_path)


def test_subject_contracts():
    vol = np.zeros((2, 2, 2))
    with pytest.raises(DimensionError):
        Subject("a", vol, vol, vol, np.zeros((2, 2, 3)), vol.astype(np.uint8), 50.0, 100)
    with pytest.raises(ContractError):
        Subject("a", vol, vol, vol, vol, vol.astype(np.uint8), 50.0, 0)


def test_stack_subjects():
    subs = generate_phantoms(SMALL)
    x, ni, y = stack_subjects(subs)
    assert x.shape == (3, 4, 2, 8, 10, 10) and x.dtype == np.float32
    assert ni.shape == (3, 5) and list(y) == [int(s.label) for s in subs]
    np.testing.assert_array_equal(x[:, :, 1], np.stack([np.stack([s.seg / 4.0] * 4) for s in subs]))
