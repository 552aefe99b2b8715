"""Phantom subjects, resampling, survival binning, augmentation, folds and on-disk format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, ParseError
from .fusion import MODALITIES
from .model import ModalityInput, build_nonimage_features, modality_channels

DAYS_PER_MONTH = 365.25 / 12
MAGIC = b"MMV1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class SurvivalClass(IntEnum):
    SHORT = 0
    MID = 1
    LONG = 2


@dataclass
class Subject:
    id: str
    flair: np.ndarray
    t1: np.ndarray
    t1ce: np.ndarray
    t2: np.ndarray
    seg: np.ndarray
    age: float
    survival_days: int

    def __post_init__(self):
        shapes = {np.shape(getattr(self, m)) for m in MODALITIES + ("seg",)}
        if len(shapes) != 1:
            raise DimensionError(f"subject {self.id}: volume shapes differ {sorted(shapes)}")
        if self.survival_days < 1:
            raise ContractError(f"subject {self.id}: survival_days must be >= 1")

    @property
    def shape(self):
        return self.seg.shape

    @property
    def label(self):
        return bin_survival(self.survival_days)

    def volumes(self):
        return [getattr(self, m) for m in MODALITIES]

    def modality_inputs(self):
        return {m: ModalityInput(getattr(self, m), self.seg) for m in MODALITIES}

    def model_inputs(self):
        """``(4 x 2 x D x H x W inputs, length-5 non-image vector)``."""
        x = np.stack([modality_channels(ModalityInput(v, self.seg)) for v in self.volumes()])
        ni = build_nonimage_features(self.seg, self.flair, self.age).as_array()
        return x, ni


def bin_survival(survival_days):
    """Short (<= 10 months), mid (10-15), long (>= 15). One month is 365.25/12 days."""
    if survival_days <= 0:
        raise ContractError(f"survival days must be positive, got {survival_days}")
    months = survival_days / DAYS_PER_MONTH
    if months <= 10:
        return SurvivalClass.SHORT
    if months < 15:
        return SurvivalClass.MID
    return SurvivalClass.LONG


# -- phantoms -------------------------------------------------------------

@dataclass
class PhantomSpec:
    seed: int = 0
    n_subjects: int = 16
    shape: tuple = (16, 32, 32)
    tumor_count: tuple = (1, 3)
    radius_range: tuple = (0.12, 0.3)
    class_signal: float = 0.9
    class_weights: tuple = (0.5, 0.3, 0.2)
    age_share: float = 0.5  # fraction of the risk signal carried by age, the rest by tumour size

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.n_subjects <= 0 or len(self.shape) != 3 or min(self.shape) <= 0:
            raise ConfigError("subject count and shape extents must be positive")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid radius range {self.radius_range}")
        if hi > 0.5:
            raise ConfigError("tumor radius exceeds the volume (radius fraction > 0.5)")
        if not 1 <= self.tumor_count[0] <= self.tumor_count[1] <= 3:
            raise ConfigError("tumor count range must lie within [1, 3]")
        if not 0 <= self.class_signal <= 1:
            raise ConfigError("class_signal must lie in [0, 1]")
        if not 0 <= self.age_share <= 1:
            raise ConfigError("age_share must lie in [0, 1]")
        w = np.asarray(self.class_weights, dtype=float)
        if w.shape != (3,) or np.any(w <= 0):
            raise ConfigError("class_weights needs three positive entries")
        self.class_weights = tuple(float(v) for v in w / w.sum())


# per-modality intensity of (brain, edema, enhancing, necrosis)
_CONTRAST = {
    "flair": (0.55, 1.00, 0.70, 0.45),
    "t1": (0.70, 0.50, 0.55, 0.25),
    "t1ce": (0.65, 0.55, 1.00, 0.30),
    "t2": (0.45, 0.90, 0.70, 1.00),
}
# months drawn for each class when back-computing survival days
_MONTH_RANGES = ((2.0, 9.8), (10.3, 14.7), (15.3, 40.0))


def _smooth_noise(rng, shape, passes=2):
    x = rng.standard_normal(shape)
    for _ in range(passes):
        for ax in range(3):
            x = (np.roll(x, 1, ax) + x + np.roll(x, -1, ax)) / 3.0
    return x / (x.std() + 1e-12)


def _phantom(spec: PhantomSpec, index):
    rng = np.random.default_rng([spec.seed, index])
    shape = spec.shape
    grid = np.stack(np.meshgrid(*[(np.arange(s) + 0.5) / s - 0.5 for s in shape], indexing="ij"))
    semi = rng.uniform(0.38, 0.46, size=3)
    brain = ((grid / semi[:, None, None, None]) ** 2).sum(axis=0) <= 1.0

    # latent risk: age and tumour burden both raise it
    u_age, u_size, u_noise = rng.standard_normal(3)
    signal = spec.class_signal
    mix = math.sqrt(spec.age_share) * u_age + math.sqrt(1 - spec.age_share) * u_size
    score = signal * mix + math.sqrt(1 - signal ** 2) * u_noise
    age = float(np.clip(round(60 + 11 * u_age, 1), 18, 95))
    lo, hi = spec.radius_range
    radius = lo + (hi - lo) * NormalDist().cdf(u_size)

    n_layers = int(rng.integers(spec.tumor_count[0], spec.tumor_count[1] + 1))
    centre = rng.uniform(-0.15, 0.15, size=3) * semi / 0.46
    dist = np.sqrt(((grid - centre[:, None, None, None]) ** 2).sum(axis=0))
    seg = np.zeros(shape, dtype=np.uint8)
    # nested spheres: edema (2) outermost, enhancing (4), necrotic core (1)
    for label, frac in ((2, 1.0), (4, 0.65), (1, 0.35))[:n_layers]:
        seg[(dist <= radius * frac) & brain] = label

    w = spec.class_weights
    q_short = NormalDist().inv_cdf(1 - w[0])
    q_long = NormalDist().inv_cdf(w[2])
    if score >= q_short:
        cls = SurvivalClass.SHORT
    elif score < q_long:
        cls = SurvivalClass.LONG
    else:
        cls = SurvivalClass.MID
    m_lo, m_hi = _MONTH_RANGES[cls]
    days = max(1, int(round(rng.uniform(m_lo, m_hi) * DAYS_PER_MONTH)))
    assert bin_survival(days) == cls

    texture = _smooth_noise(rng, shape)
    tissue = np.zeros(5, dtype=int)
    tissue[[2, 4, 1]] = (1, 2, 3)
    vols = {}
    for m in MODALITIES:
        level = np.asarray(_CONTRAST[m])[tissue[seg]]
        noise = 0.05 * rng.standard_normal(shape)
        vol = 100.0 * (level * (1.0 + 0.08 * texture) + noise)
        vol = np.where(brain, np.maximum(vol, 1.0), 0.0)
        vols[m] = vol.astype(np.float32)
    return Subject(id=f"phantom_{spec.seed}_{index:04d}", seg=seg, age=age, survival_days=days, **vols)


def generate_phantoms(spec: PhantomSpec):
    """Synthetic subjects whose survival class follows a known rule on tumour size and age."""
    return [_phantom(spec, i) for i in range(spec.n_subjects)]


# -- resampling -----------------------------------------------------------

def _cubic_weights(src, dst, a=-0.5):
    """``dst x src`` Catmull-Rom interpolation matrix with half-voxel alignment and edge clamping."""
    coords = (np.arange(dst) + 0.5) * src / dst - 0.5
    base = np.floor(coords).astype(int)
    mat = np.zeros((dst, src))
    for off in (-1, 0, 1, 2):
        idx = base + off
        t = np.abs(coords - idx)
        wgt = np.where(t <= 1, (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
                       np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0))
        np.add.at(mat, (np.arange(dst), np.clip(idx, 0, src - 1)), wgt)
    return mat


def _check_resample(src_shape, target):
    target = tuple(int(t) for t in target)
    if len(target) != len(src_shape):
        raise DimensionError(f"target {target} has wrong rank for {src_shape}")
    if min(target) < 2:
        raise ContractError(f"target extents must be >= 2, got {target}")
    if min(src_shape) < 2:
        raise ContractError(f"source has a degenerate axis: {src_shape}")
    return target


def resample_volume(x, target):
    """Separable cubic (Catmull-Rom) resampling to ``target``."""
    x = np.asarray(x, dtype=np.float64)
    target = _check_resample(x.shape, target)
    out = x
    for ax, (s, t) in enumerate(zip(x.shape, target)):
        if s == t:
            continue
        out = np.moveaxis(np.tensordot(_cubic_weights(s, t), out, axes=([1], [ax])), 0, ax)
    return out


def nearest_indices(src, dst):
    return np.minimum(np.floor((np.arange(dst) + 0.5) * src / dst).astype(int), src - 1)


def resample_mask(m, target):
    """Nearest-neighbour resampling; never introduces new labels."""
    m = np.asarray(m)
    target = _check_resample(m.shape, target)
    idx = [nearest_indices(s, t) for s, t in zip(m.shape, target)]
    return m[np.ix_(*idx)]


# -- augmentation ---------------------------------------------------------

def augment_arrays(arrays, rng):
    """Apply one random H-flip / W-flip / axial right-angle rotation to every array.

    Arrays share their trailing ``D x H x W`` axes.
    """
    flip_h, flip_w = rng.integers(0, 2, size=2)
    square = arrays[0].shape[-2] == arrays[0].shape[-1]
    turns = int(rng.integers(0, 4)) if square else 2 * int(rng.integers(0, 2))
    out = []
    for a in arrays:
        if flip_h:
            a = np.flip(a, -2)
        if flip_w:
            a = np.flip(a, -1)
        if turns:
            a = np.rot90(a, turns, axes=(-2, -1))
        out.append(np.ascontiguousarray(a))
    return out


def augment(subject: Subject, seed):
    rng = np.random.default_rng(seed)
    vols = augment_arrays([getattr(subject, m) for m in MODALITIES + ("seg",)], rng)
    return Subject(id=subject.id, age=subject.age, survival_days=subject.survival_days,
                   **dict(zip(MODALITIES + ("seg",), vols)))


def flip(subject: Subject, axis):
    vols = [np.ascontiguousarray(np.flip(getattr(subject, m), axis)) for m in MODALITIES + ("seg",)]
    return Subject(id=subject.id, age=subject.age, survival_days=subject.survival_days,
                   **dict(zip(MODALITIES + ("seg",), vols)))


def rotate90(subject: Subject, turns=1):
    vols = [np.ascontiguousarray(np.rot90(getattr(subject, m), turns, axes=(1, 2)))
            for m in MODALITIES + ("seg",)]
    return Subject(id=subject.id, age=subject.age, survival_days=subject.survival_days,
                   **dict(zip(MODALITIES + ("seg",), vols)))


# -- folds ----------------------------------------------------------------

@dataclass
class FoldSplit:
    n_folds: int
    folds: list = field(default_factory=list)

    def train_ids(self, i):
        return [s for j, f in enumerate(self.folds) if j != i for s in f]


def split_folds(ids, n_folds, seed, labels=None):
    """Stratified round-robin folds.

    Ids are grouped by label (a single group when ``labels`` is None),
    shuffled per group, and dealt across folds with one running counter so
    both fold sizes and per-class counts differ by at most one.
    """
    ids = list(ids)
    if n_folds < 1 or n_folds > len(ids):
        raise ConfigError(f"cannot make {n_folds} folds from {len(ids)} subjects")
    if labels is None:
        labels = [0] * len(ids)
    if len(labels) != len(ids):
        raise ContractError("ids and labels differ in length")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(n_folds)]
    pos = 0
    for cls in sorted(set(int(c) for c in labels)):
        group = [i for i, c in zip(ids, labels) if int(c) == cls]
        for j in rng.permutation(len(group)):
            folds[pos % n_folds].append(group[j])
            pos += 1
    return FoldSplit(n_folds, folds)


# -- MMV1 tensor files ----------------------------------------------------

def encode_tensor(arr):
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        code = 1
    elif np.issubdtype(arr.dtype, np.floating):
        code = 0
    else:
        raise ContractError(f"unsupported dtype {arr.dtype} for MMV1")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(buf, path="<bytes>"):
    if len(buf) < 6:
        raise ParseError(path, len(buf), "truncated header")
    if buf[:4] != MAGIC:
        raise ParseError(path, 0, f"bad magic {bytes(buf[:4])!r}")
    code, rank = buf[4], buf[5]
    if code not in DTYPE_CODES:
        raise ParseError(path, 4, f"unknown dtype code {code}")
    end = 6 + 4 * rank
    if len(buf) < end:
        raise ParseError(path, len(buf), "truncated extents")
    shape = struct.unpack(f"<{rank}I", buf[6:end])
    dt = DTYPE_CODES[code]
    need = int(np.prod(shape)) * dt.itemsize
    if len(buf) - end != need:
        raise ParseError(path, end, f"payload is {len(buf) - end} bytes, shape {shape} needs {need}")
    return np.frombuffer(buf, dtype=dt, offset=end).reshape(shape).copy()


def write_tensor(path, arr):
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes(), path)


def write_dataset(subjects, directory):
    """One directory per subject plus a ``manifest.txt`` index."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for s in subjects:
        sub = root / s.id
        sub.mkdir(exist_ok=True)
        for m in MODALITIES:
            write_tensor(sub / f"{m}.mmv", np.asarray(getattr(s, m), dtype=np.float32))
        write_tensor(sub / "seg.mmv", np.asarray(s.seg, dtype=np.uint8))
        (sub / "meta.txt").write_text(f"id={s.id}\nage={s.age!r}\nsurvival_days={int(s.survival_days)}\n")
        names.append(s.id)
    (root / "manifest.txt").write_text("".join(f"{n}\n" for n in names))


def _read_meta(path):
    meta = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(path, lineno, f"expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    for key in ("id", "age", "survival_days"):
        if key not in meta:
            raise ParseError(path, 0, f"missing key {key!r}")
    return meta


def read_dataset(directory):
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise ParseError(manifest, 0, "manifest not found")
    subjects = []
    for name in manifest.read_text().split():
        sub = root / name
        meta = _read_meta(sub / "meta.txt")
        vols = {m: read_tensor(sub / f"{m}.mmv") for m in MODALITIES}
        seg = read_tensor(sub / "seg.mmv")
        try:
            subjects.append(Subject(id=meta["id"], seg=seg, age=float(meta["age"]),
                                    survival_days=int(meta["survival_days"]), **vols))
        except DimensionError as exc:
            raise ParseError(sub, 0, str(exc)) from exc
    return subjects


def stack_subjects(subjects):
    """Model-ready arrays: inputs ``S x 4 x 2 x D x H x W``, non-image ``S x 5``, labels ``S``."""
    xs, nis, ys = [], [], []
    for s in subjects:
        x, ni = s.model_inputs()
        xs.append(x)
        nis.append(ni)
        ys.append(int(s.label))
    return np.stack(xs), np.stack(nis), np.asarray(ys, dtype=np.int64)
