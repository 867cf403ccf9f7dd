"""Digit images, synthetic degradations, ground truth and evaluation groups.

Clean digits come either from IDX files (MNIST layout) or from a seeded
procedural glyph renderer, so nothing has to be downloaded.
"""
from __future__ import annotations

import csv
import gzip
import io
import logging
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConsistencyError, FormatError, ParameterError

log = logging.getLogger(__name__)

BLUR_KERNELS = (3, 5, 7, 9, 11, 13, 15, 17, 19)
CONTRAST_RANGE = (0.4, 0.9)
INTENSITY_RANGE = (-160.0, 250.0)
CONTRAST_GRID = tuple(np.linspace(*CONTRAST_RANGE, 6))
INTENSITY_GRID = tuple(np.linspace(*INTENSITY_RANGE, 6))
VARIANTS_PER_IMAGE = 9
KINDS = ("Blur", "Illumination", "Mixed")

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
OQAI_MAGIC = b"OQAI"
MANIFEST_FIELDS = ["sample_id", "clean_id", "label", "kind", "kernel",
                   "contrast", "intensity", "gt_score"]


# ---------------------------------------------------------------- types

@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    kernel: int | None = None
    contrast: float | None = None
    intensity: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown degradation kind {self.kind!r}")
        needs_blur = self.kind in ("Blur", "Mixed")
        needs_light = self.kind in ("Illumination", "Mixed")
        if needs_blur != (self.kernel is not None):
            raise ParameterError(f"{self.kind} {'requires' if needs_blur else 'forbids'} a blur kernel")
        if needs_light != (self.contrast is not None and self.intensity is not None):
            raise ParameterError(f"{self.kind} {'requires' if needs_light else 'forbids'} contrast and intensity")


@dataclass
class LabeledSample:
    sample_id: int
    image: np.ndarray
    label: int
    clean_id: int
    spec: DegradationSpec
    gt_score: float | None = None


@dataclass
class GroupSample:
    members: list
    kind: str

    def __post_init__(self):
        if not 3 <= len(self.members) <= 10:
            raise ParameterError(f"group size {len(self.members)} outside [3, 10]")
        labels = [m.label for m in self.members]
        if self.kind == "Intra" and len(set(labels)) != 1:
            raise ConsistencyError("Intra group with mixed classes")
        if self.kind == "Inter" and len(set(labels)) != len(labels):
            raise ConsistencyError("Inter group with repeated classes")
        if self.kind not in ("Intra", "Inter"):
            raise ParameterError(f"unknown group kind {self.kind!r}")


# ---------------------------------------------------------------- IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if not data:
        raise OSError(f"{path}: empty file")
    return data


def load_idx(images_path, labels_path) -> list[tuple[np.ndarray, int]]:
    """Read an IDX image file and its label file (plain or gzipped)."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 4 or len(lab) < 4:
        raise OSError("truncated IDX header")
    (magic,) = struct.unpack(">I", img[:4])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad image magic {magic}, expected {IDX_IMAGES_MAGIC}")
    (lmagic,) = struct.unpack(">I", lab[:4])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad label magic {lmagic}, expected {IDX_LABELS_MAGIC}")
    if len(img) < 16 or len(lab) < 8:
        raise OSError("truncated IDX header")
    _, n, rows, cols = struct.unpack(">IIII", img[:16])
    _, ln = struct.unpack(">II", lab[:8])
    if n != ln:
        raise ConsistencyError(f"{n} images but {ln} labels")
    if len(img) < 16 + n * rows * cols or len(lab) < 8 + n:
        raise OSError("truncated IDX payload")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    pixels = pixels.reshape(n, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8)
    return [(pixels[i].copy(), int(labels[i])) for i in range(n)]


def write_idx(images: np.ndarray, labels: Sequence[int], images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    labels = np.asarray(labels, dtype=np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def find_idx(data_dir) -> tuple[Path, Path] | None:
    """Locate MNIST-style training files under ``data_dir``, if any."""
    if not data_dir:
        return None
    root = Path(data_dir)
    for stem in ("train-images-idx3-ubyte", "train-images.idx3-ubyte"):
        for suffix in ("", ".gz"):
            img = root / (stem + suffix)
            lab = root / (stem.replace("images", "labels").replace("idx3", "idx1") + suffix)
            if img.exists() and lab.exists():
                return img, lab
    return None


# ---------------------------------------------------------------- procedural glyphs

def _arc(cx, cy, r, t0, t1, n=24, ry=None):
    t = np.radians(np.linspace(t0, t1, n))
    return np.stack([cx + r * np.cos(t), cy + (ry or r) * np.sin(t)], axis=1)


def _line(*pts):
    return np.asarray(pts, dtype=np.float64)


def _bezier(p0, p1, p2, n=16):
    t = np.linspace(0, 1, n)[:, None]
    p0, p1, p2 = map(np.asarray, (p0, p1, p2))
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


# unit-square strokes, y pointing down
_GLYPHS = {
    0: lambda: [_arc(0.5, 0.5, 0.27, 0, 360, 40, ry=0.38)],
    1: lambda: [_line((0.52, 0.12), (0.5, 0.88)), _line((0.36, 0.28), (0.52, 0.12))],
    2: lambda: [np.vstack([_arc(0.5, 0.33, 0.22, 195, 390), _line((0.25, 0.88), (0.78, 0.88))])],
    3: lambda: [_arc(0.49, 0.31, 0.19, 200, 450), _arc(0.49, 0.69, 0.21, 270, 520)],
    4: lambda: [_line((0.62, 0.12), (0.22, 0.62), (0.8, 0.62)), _line((0.62, 0.12), (0.62, 0.88))],
    5: lambda: [_line((0.74, 0.13), (0.33, 0.13), (0.31, 0.5)), _arc(0.48, 0.65, 0.22, 220, 520)],
    6: lambda: [_bezier((0.7, 0.13), (0.28, 0.2), (0.3, 0.66)), _arc(0.5, 0.66, 0.2, 180, 540, 36)],
    7: lambda: [_line((0.24, 0.13), (0.76, 0.13), (0.42, 0.88))],
    8: lambda: [_arc(0.5, 0.3, 0.17, 0, 360, 30), _arc(0.5, 0.68, 0.21, 0, 360, 36)],
    9: lambda: [_arc(0.5, 0.34, 0.2, 0, 360, 36), _line((0.7, 0.36), (0.6, 0.88))],
}


def render_digit(label: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """Rasterize one jittered digit glyph as a uint8 image."""
    strokes = _GLYPHS[label]()
    ang = rng.uniform(-0.22, 0.22)
    sx, sy = rng.uniform(0.8, 1.1, 2)
    shear = rng.uniform(-0.25, 0.25)
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    aff = rot @ np.array([[sx, shear], [0, sy]])
    shift = rng.uniform(-0.05, 0.05, 2)
    wobble_amp = rng.uniform(0, 0.03, 2)
    wobble_ph = rng.uniform(0, 2 * np.pi, 2)
    thick = rng.uniform(0.9, 1.7)

    segs = []
    for s in strokes:
        p = (s - 0.5) @ aff.T + 0.5 + shift
        p = p + wobble_amp * np.sin(2 * np.pi * p[:, ::-1] * 1.5 + wobble_ph)
        p = p * (size - 8) + 4
        segs.append(np.stack([p[:-1], p[1:]], axis=1))
    segs = np.concatenate(segs)  # (S, 2, 2)

    yy, xx = np.mgrid[0:size, 0:size]
    pix = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=1)[:, None, :]
    a, b = segs[None, :, 0], segs[None, :, 1]
    ab = b - a
    t = np.clip(((pix - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0, 1)
    dist = np.linalg.norm(pix - (a + t[..., None] * ab), axis=-1).min(axis=1)
    ink = np.clip(thick - dist + 0.5, 0, 1)
    return np.floor(ink.reshape(size, size) * 255 + 0.5).astype(np.uint8)


def procedural_digits(n: int, seed: int, size: int = 28) -> list[tuple[np.ndarray, int]]:
    """``n`` rendered digits with classes balanced round-robin, order shuffled."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    return [(render_digit(int(lab), np.random.default_rng([seed, i]), size), int(lab))
            for i, lab in enumerate(labels)]


# ---------------------------------------------------------------- degradations

def _round_clip(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def gaussian_kernel1d(k: int) -> np.ndarray:
    if k % 2 == 0 or not 3 <= k <= 19:
        raise ParameterError(f"blur kernel must be odd in [3, 19], got {k}")
    sigma = k / 6.0
    x = np.arange(k) - k // 2
    w = np.exp(-x ** 2 / (2 * sigma ** 2))
    return w / w.sum()


def gaussian_blur(img: np.ndarray, k: int) -> np.ndarray:
    """Separable Gaussian blur with sigma = k/6 and edge clamping."""
    w = gaussian_kernel1d(k)
    r = k // 2
    x = np.pad(np.asarray(img, dtype=np.float64), r, mode="edge")
    h, wd = img.shape
    rows = sum(w[i] * x[:, i:i + wd] for i in range(k))
    out = sum(w[i] * rows[i:i + h, :] for i in range(k))
    return _round_clip(out)


def adjust_illumination(img: np.ndarray, contrast: float, intensity: float,
                        check_range: bool = True) -> np.ndarray:
    """``clamp(round(contrast * p + intensity))`` per pixel."""
    if check_range:
        if not CONTRAST_RANGE[0] <= contrast <= CONTRAST_RANGE[1]:
            raise ParameterError(f"contrast {contrast} outside {CONTRAST_RANGE}")
        if not INTENSITY_RANGE[0] <= intensity <= INTENSITY_RANGE[1]:
            raise ParameterError(f"intensity {intensity} outside {INTENSITY_RANGE}")
    return _round_clip(contrast * np.asarray(img, dtype=np.float64) + intensity)


def apply_spec(img: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    out = img
    if spec.kernel is not None:
        out = gaussian_blur(out, spec.kernel)
    if spec.contrast is not None:
        out = adjust_illumination(out, spec.contrast, spec.intensity)
    return out


def degradation_specs(kind: str, rng: np.random.Generator) -> list[DegradationSpec]:
    """The nine degradations applied to one clean image."""
    if kind == "Blur":
        return [DegradationSpec("Blur", kernel=k) for k in BLUR_KERNELS]
    grid = [(c, i) for c in CONTRAST_GRID for i in INTENSITY_GRID]
    if kind == "Illumination":
        picks = rng.choice(len(grid), VARIANTS_PER_IMAGE, replace=False)
        return [DegradationSpec("Illumination", contrast=float(grid[j][0]),
                                intensity=float(grid[j][1])) for j in picks]
    if kind == "Mixed":
        picks = rng.choice(len(grid), VARIANTS_PER_IMAGE, replace=False)
        return [DegradationSpec("Mixed", kernel=k, contrast=float(grid[j][0]),
                                intensity=float(grid[j][1]))
                for k, j in zip(BLUR_KERNELS, picks)]
    raise ParameterError(f"unknown degradation kind {kind!r}")


def synth_dataset(clean: Sequence[tuple[np.ndarray, int]], kind: str, seed: int) -> list[LabeledSample]:
    """Nine degraded variants of every clean image, in clean-image order."""
    if not clean:
        raise ParameterError("synth_dataset needs at least one clean image")
    if kind not in KINDS:
        raise ParameterError(f"unknown degradation kind {kind!r}")
    samples = []
    for cid, (img, label) in enumerate(clean):
        rng = np.random.default_rng([seed, cid])
        for spec in degradation_specs(kind, rng):
            samples.append(LabeledSample(len(samples), apply_spec(img, spec), int(label), cid, spec))
    return samples


# ---------------------------------------------------------------- ground truth

def gt_from_features(clean_feat: np.ndarray, deg_feat: np.ndarray) -> np.ndarray:
    """(cosine + 1) / 2 row by row; a zero-norm row counts as cosine 0."""
    num = (clean_feat * deg_feat).sum(axis=1)
    den = np.linalg.norm(clean_feat, axis=1) * np.linalg.norm(deg_feat, axis=1)
    cos = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return (np.clip(cos, -1, 1) + 1) / 2


def make_ground_truth(samples: Sequence[LabeledSample], clean_images: Sequence[np.ndarray],
                      extractor) -> list[LabeledSample]:
    """Attach gt-scores computed from extractor features of clean vs degraded."""
    from .extractor import features

    if samples and max(s.clean_id for s in samples) >= len(clean_images):
        raise ConsistencyError("sample refers to a missing clean source")
    clean_f = features(extractor, np.asarray(clean_images)).T
    deg_f = features(extractor, np.stack([s.image for s in samples])).T
    ids = np.array([s.clean_id for s in samples])
    gt = gt_from_features(clean_f[ids], deg_f)
    return [replace(s, gt_score=float(g)) for s, g in zip(samples, gt)]


# ---------------------------------------------------------------- splits, groups, triplets

def split_train_test(labels: Sequence[int], seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Half of each class's clean ids for training, the rest for testing."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        ids = np.flatnonzero(labels == c)
        rng.shuffle(ids)
        half = len(ids) // 2
        train.extend(ids[:half])
        test.extend(ids[half:])
    return np.sort(train), np.sort(test)


def build_groups(samples: Sequence[LabeledSample], kind: str, n_groups: int, seed: int,
                 size_range: tuple[int, int] = (3, 10)) -> list[GroupSample]:
    """Random evaluation groups of uniformly drawn size."""
    if kind not in ("Intra", "Inter"):
        raise ParameterError(f"unknown group kind {kind!r}")
    lo, hi = size_range
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    classes = sorted(by_class)
    if kind == "Inter" and len(classes) < lo:
        raise ParameterError(f"Inter groups need >= {lo} classes, have {len(classes)}")
    if kind == "Intra" and not any(len(v) >= lo for v in by_class.values()):
        raise ParameterError(f"no class has {lo} samples for an Intra group")
    groups = []
    for _ in range(n_groups):
        size = int(rng.integers(lo, hi + 1))
        if kind == "Intra":
            ok = [c for c in classes if len(by_class[c]) >= size]
            if not ok:
                size = max(len(v) for v in by_class.values())
                ok = [c for c in classes if len(by_class[c]) >= size]
            c = ok[int(rng.integers(len(ok)))]
            idx = rng.choice(by_class[c], size, replace=False)
        else:
            size = min(size, len(classes))
            cs = rng.choice(classes, size, replace=False)
            idx = [by_class[c][int(rng.integers(len(by_class[c])))] for c in cs]
        groups.append(GroupSample([samples[i] for i in idx], kind))
    return groups


@dataclass
class TripletBatches:
    batches: list  # each an (B, 3) int array of sample indices
    skipped_classes: int


def sample_triplets(labels: Sequence[int], batch: int, seed: int, n_batches: int = 1) -> TripletBatches:
    """Batches of same-class index triplets; classes with < 3 members are skipped."""
    labels = np.asarray(labels)
    by_class = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    usable = [c for c, ids in by_class.items() if len(ids) >= 3]
    skipped = len(by_class) - len(usable)
    if skipped:
        log.warning("sample_triplets: skipped %d classes with fewer than 3 samples", skipped)
    if not usable:
        return TripletBatches([], skipped)
    rng = np.random.default_rng(seed)
    pool = np.concatenate([by_class[c] for c in usable])
    start = np.cumsum([0] + [len(by_class[c]) for c in usable])[:-1]
    size = np.array([len(by_class[c]) for c in usable])
    out = []
    for _ in range(n_batches):
        k = rng.integers(0, len(usable), batch)
        n = size[k]
        # three distinct positions per triplet, drawn without replacement
        a = rng.integers(0, n)
        b = rng.integers(0, n - 1)
        b = b + (b >= a)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        c = rng.integers(0, n - 2)
        c = c + (c >= lo)
        c = c + (c >= hi)
        out.append(pool[start[k][:, None] + np.stack([a, b, c], axis=1)])
    return TripletBatches(out, skipped)


# ---------------------------------------------------------------- files

def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if isinstance(data, bytes) else {"newline": ""})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_oqai(path, images: Sequence[np.ndarray]) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    if h > 255 or w > 255:
        raise ParameterError("OQAI stores width/height as u8")
    atomic_write(path, OQAI_MAGIC + struct.pack("<IBB", n, w, h) + images.tobytes())


def read_oqai(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != OQAI_MAGIC:
        raise FormatError(f"{path}: not an OQAI image store")
    if len(data) < 10:
        raise OSError(f"{path}: truncated header")
    n, w, h = struct.unpack("<IBB", data[4:10])
    if len(data) != 10 + n * w * h:
        raise OSError(f"{path}: expected {n * w * h} pixel bytes, found {len(data) - 10}")
    return np.frombuffer(data, dtype=np.uint8, offset=10).reshape(n, h, w).copy()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)


def manifest_csv(samples: Sequence[LabeledSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_FIELDS)
    for s in samples:
        w.writerow([s.sample_id, s.clean_id, s.label, s.spec.kind, _fmt(s.spec.kernel),
                    _fmt(s.spec.contrast), _fmt(s.spec.intensity), _fmt(s.gt_score)])
    return buf.getvalue()


def write_manifest(path, samples: Sequence[LabeledSample]) -> None:
    atomic_write(path, manifest_csv(samples))


def read_manifest(path, images: np.ndarray) -> list[LabeledSample]:
    """Rebuild samples from a manifest and the matching OQAI image array."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise FormatError(f"{path}: unexpected manifest columns {reader.fieldnames}")
        for row in reader:
            sid = int(row["sample_id"])
            if sid >= len(images):
                raise ConsistencyError(f"manifest sample {sid} has no image")
            spec = DegradationSpec(
                row["kind"],
                kernel=int(row["kernel"]) if row["kernel"] else None,
                contrast=float(row["contrast"]) if row["contrast"] else None,
                intensity=float(row["intensity"]) if row["intensity"] else None)
            gt = float(row["gt_score"]) if row["gt_score"] else None
            out.append(LabeledSample(sid, images[sid], int(row["label"]), int(row["clean_id"]), spec, gt))
    return out
