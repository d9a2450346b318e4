"""Synthetic abdominal-CT-like phantoms, quality degradations, and rubric oracle.

Geometry is expressed in normalised coordinates ([-1, 1] on both axes) so a
phantom can be rendered at any size; intensities are windowed to [0, 1]
(soft-tissue window of -160..240 HU).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .template import ABSENT, ScoreVector, encode_scores

RASTER_MAGIC = b"CTIQ"
_RASTER_HEADER = struct.Struct("<4sIII")

HU_WINDOW = (-160.0, 240.0)


def window(hu):
    lo, hi = HU_WINDOW
    return np.clip((np.asarray(hu, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True)
class QualityLevel:
    name: str
    noise_sigma: float
    blur_radius: float


LEVELS = (
    QualityLevel("NDCT", 0.0, 0.0),
    QualityLevel("LDCT", 0.10, 0.0),
    QualityLevel("MAP-NN(1)", 0.075, 0.3),
    QualityLevel("MAP-NN(2)", 0.06, 0.5),
    QualityLevel("MAP-NN(3)", 0.045, 0.7),
    QualityLevel("MAP-NN(4)", 0.03, 0.9),
    QualityLevel("MAP-NN(5)", 0.02, 1.1),
    QualityLevel("RED-CNN", 0.015, 1.4),
)
LEVEL_NAMES = tuple(lv.name for lv in LEVELS)


def level_by_name(name: str) -> QualityLevel:
    for lv in LEVELS:
        if lv.name == name or _slug(lv.name) == _slug(name):
            return lv
    raise KeyError(f"unknown quality level {name!r}")


# rubric thresholds ---------------------------------------------------------------
NOISE_THRESHOLDS = (0.01, 0.03, 0.06)
# structure CNR = c_s / (sigma + STRUCTURE_BLUR_WEIGHT * blur)
STRUCTURE_BLUR_WEIGHT = 0.03
STRUCTURE_CNR_THRESHOLDS = (6.0, 4.0, 3.0)
# lesion CNR = c_l * r / (r + 2 * blur) / (sigma + LESION_NOISE_FLOOR)
LESION_NOISE_FLOOR = 0.01
LESION_CNR_THRESHOLDS = (3.0, 1.5, 0.75)
JITTER_PROB = 0.15


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float
    intensity: float


@dataclass(frozen=True)
class Structure:
    kind: str  # "dot" or "line"
    center: tuple[float, float]
    length: float
    angle: float


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float]
    radius: float  # normalised units
    contrast: float


@dataclass(frozen=True)
class PhantomSpec:
    patient_id: int
    slice_seed: int
    organs: tuple[Ellipse, ...]
    structures: tuple[Structure, ...]
    structure_contrast: float
    lesion: Lesion | None = None


def make_phantom_spec(patient_id: int, slice_seed: int, seed: int = 0,
                      lesion: bool | None = None) -> PhantomSpec:
    """Draw a phantom: organ layout from the patient, jitter and details from the slice.

    ``lesion`` forces presence/absence; by default it is a seeded coin flip.
    """
    prng = np.random.default_rng([seed, patient_id, 7919])
    srng = np.random.default_rng([seed, patient_id, slice_seed, 104729])

    def jit(scale):
        return srng.uniform(-scale, scale)

    # (center, axes, HU) templates; patient perturbs, slice jitters
    templates = [
        ((0.0, 0.05), (0.88, 0.68), -100.0),  # body outline (fat)
        ((0.0, 0.07), (0.78, 0.58), 30.0),  # muscle / soft tissue
        ((-0.33, -0.08), (0.36, 0.30), 60.0),  # liver
        ((0.42, -0.18), (0.15, 0.20), 50.0),  # spleen
        ((-0.30, 0.30), (0.10, 0.14), 150.0),  # right kidney
        ((0.30, 0.30), (0.10, 0.14), 150.0),  # left kidney
        ((0.05, 0.22), (0.06, 0.06), 180.0),  # aorta
        ((0.0, 0.46), (0.11, 0.10), 600.0),  # vertebra
    ]
    organs = []
    for (cx, cy), (ax, ay), hu in templates:
        pcx, pcy = cx + prng.uniform(-0.05, 0.05), cy + prng.uniform(-0.05, 0.05)
        pax, pay = ax * prng.uniform(0.9, 1.1), ay * prng.uniform(0.9, 1.1)
        angle = prng.uniform(-0.2, 0.2)
        phu = hu + prng.uniform(-10, 10)
        organs.append(Ellipse(
            center=(pcx + jit(0.02), pcy + jit(0.02)),
            axes=(pax * (1 + jit(0.03)), pay * (1 + jit(0.03))),
            angle=angle + jit(0.03),
            intensity=float(window(phu)),
        ))

    liver = organs[2]
    structures = []
    n_struct = int(srng.integers(6, 9))
    for i in range(n_struct):
        kind = "dot" if i % 2 == 0 else "line"
        r = np.sqrt(srng.uniform(0.0, 0.55))
        theta = srng.uniform(0, 2 * np.pi)
        c = (liver.center[0] + r * liver.axes[0] * np.cos(theta) * 0.8,
             liver.center[1] + r * liver.axes[1] * np.sin(theta) * 0.8)
        if i >= 4:  # a few in the mesentery between organs
            c = (srng.uniform(-0.15, 0.2), srng.uniform(-0.3, 0.05))
        structures.append(Structure(kind, (float(c[0]), float(c[1])),
                                    float(srng.uniform(0.12, 0.22)), float(srng.uniform(0, np.pi))))
    structure_contrast = float(srng.uniform(0.20, 0.30))

    present = bool(srng.random() < 0.5) if lesion is None else lesion
    les = None
    if present:
        r = np.sqrt(srng.uniform(0.0, 0.2))
        theta = srng.uniform(0, 2 * np.pi)
        les = Lesion(
            center=(float(liver.center[0] + r * liver.axes[0] * np.cos(theta)),
                    float(liver.center[1] + r * liver.axes[1] * np.sin(theta))),
            radius=float(srng.uniform(0.07, 0.12)),
            contrast=float(srng.uniform(0.05, 0.20)),
        )
    return PhantomSpec(patient_id, slice_seed, tuple(organs), tuple(structures),
                       structure_contrast, les)


def _grid(size: int, oversample: int):
    n = size * oversample
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return np.meshgrid(coords, coords)  # x (columns), y (rows)


def _downsample(img: np.ndarray, size: int, oversample: int) -> np.ndarray:
    return img.reshape(size, oversample, size, oversample).mean(axis=(1, 3))


def generate_phantom(spec: PhantomSpec, size: int = 64, oversample: int = 4) -> np.ndarray:
    """Render a clean (NDCT-like) windowed slice of ``size`` x ``size`` pixels."""
    if size < 32:
        raise ValueError("phantom size must be at least 32 pixels")
    x, y = _grid(size, oversample)
    img = np.zeros_like(x)
    for e in spec.organs:
        ca, sa = math.cos(e.angle), math.sin(e.angle)
        dx, dy = x - e.center[0], y - e.center[1]
        u, v = dx * ca + dy * sa, -dx * sa + dy * ca
        inside = (u / e.axes[0]) ** 2 + (v / e.axes[1]) ** 2 <= 1.0
        img[inside] = e.intensity

    # small structures: about one pixel thick at the rendered size
    half_width = 1.0 / size
    for s in spec.structures:
        dx, dy = x - s.center[0], y - s.center[1]
        if s.kind == "dot":
            mask = dx * dx + dy * dy <= (1.2 * half_width) ** 2
        else:
            ca, sa = math.cos(s.angle), math.sin(s.angle)
            along = dx * ca + dy * sa
            across = -dx * sa + dy * ca
            mask = (np.abs(along) <= s.length / 2) & (np.abs(across) <= half_width)
        img[mask] += spec.structure_contrast

    if spec.lesion is not None:
        les = spec.lesion
        dx, dy = x - les.center[0], y - les.center[1]
        img[dx * dx + dy * dy <= les.radius ** 2] -= les.contrast

    return np.clip(_downsample(img, size, oversample), 0.0, 1.0)


def degrade(image: np.ndarray, level: QualityLevel, seed, clamp: bool = True) -> np.ndarray:
    """Gaussian blur of ``blur_radius`` pixels, then i.i.d. Gaussian noise, then clamp."""
    out = np.asarray(image, dtype=np.float64)
    if level.blur_radius > 0:
        out = gaussian_filter(out, sigma=level.blur_radius, mode="nearest")
    else:
        out = out.copy()
    if level.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        out += rng.normal(0.0, level.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0) if clamp else out


def _threshold_score(value: float, thresholds, higher_is_better: bool) -> int:
    for score, t in enumerate(thresholds, start=1):
        if (value >= t) if higher_is_better else (value <= t):
            return score
    return 4


def structure_cnr(spec: PhantomSpec, level: QualityLevel) -> float:
    denom = level.noise_sigma + STRUCTURE_BLUR_WEIGHT * level.blur_radius
    return math.inf if denom == 0 else spec.structure_contrast / denom


def lesion_cnr(spec: PhantomSpec, level: QualityLevel, size: int = 64) -> float | None:
    if spec.lesion is None:
        return None
    r_px = spec.lesion.radius * size / 2
    edge = spec.lesion.contrast * r_px / (r_px + 2.0 * level.blur_radius)
    return edge / (level.noise_sigma + LESION_NOISE_FLOOR)


def rubric_scores(spec: PhantomSpec, level: QualityLevel, size: int = 64) -> ScoreVector:
    """Jitter-free rubric scores."""
    nf = _threshold_score(level.noise_sigma, NOISE_THRESHOLDS, higher_is_better=False)
    ss = _threshold_score(structure_cnr(spec, level), STRUCTURE_CNR_THRESHOLDS, higher_is_better=True)
    lc = lesion_cnr(spec, level, size)
    lesion = ABSENT if lc is None else _threshold_score(lc, LESION_CNR_THRESHOLDS, higher_is_better=True)
    dc = min(4, max(1, math.floor(0.5 * nf + 0.5 * ss + 0.5)))
    return ScoreVector(nf, ss, lesion, dc)


def oracle_scores(spec: PhantomSpec, level: QualityLevel, seed=None, size: int = 64) -> ScoreVector:
    """Rubric scores plus a seeded +-1 rater jitter on one metric (probability 0.15).

    Jitter that would leave 1..4 is reflected to the other direction.
    ``seed=None`` disables the jitter.
    """
    base = rubric_scores(spec, level, size)
    if seed is None:
        return base
    rng = np.random.default_rng(seed)
    if rng.random() >= JITTER_PROB:
        return base
    values = base.as_list()
    candidates = [i for i, v in enumerate(values) if v is not ABSENT]
    i = candidates[int(rng.integers(len(candidates)))]
    step = 1 if rng.random() < 0.5 else -1
    if not 1 <= values[i] + step <= 4:
        step = -step
    values[i] += step
    return ScoreVector(*values)


def augment(image: np.ndarray, seed) -> np.ndarray:
    """Seeded random horizontal flip (p=0.5) and rotation by a multiple of 90 degrees."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    quarter_turns = int(rng.integers(4))
    return apply_augment(image, flip, quarter_turns)


def apply_augment(image: np.ndarray, flip: bool, quarter_turns: int) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError("augmentation needs a square 2-D image")
    out = image[:, ::-1] if flip else image
    return np.ascontiguousarray(np.rot90(out, quarter_turns))


# raster io ------------------------------------------------------------------------

def write_raster(path, pixels: np.ndarray):
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(_RASTER_HEADER.pack(RASTER_MAGIC, h, w, 0))
        fh.write(pixels.astype("<f4").tobytes(order="C"))


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, h, w, _ = _RASTER_HEADER.unpack_from(raw)
    if magic != RASTER_MAGIC:
        raise ValueError(f"{path}: not a CTIQ raster")
    body = raw[_RASTER_HEADER.size:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: truncated raster")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


# dataset ----------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    out_dir: str = "data"
    seed: int = 0
    size: int = 64
    n_patients: int = 10
    n_test_patients: int = 2
    base_slices: int = 125


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray = field(repr=False)
    level: QualityLevel
    patient_id: int
    lesion_present: bool
    oracle: ScoreVector
    caption: str
    split: str


def slices_per_patient(cfg: DatasetConfig) -> list[int]:
    """Base-slice counts: train and test patients each share their pool evenly."""
    n_train_patients = cfg.n_patients - cfg.n_test_patients
    n_train = round(cfg.base_slices * n_train_patients / cfg.n_patients)

    def spread(total, k):
        return [total // k + (1 if i < total % k else 0) for i in range(k)]

    return spread(n_train, n_train_patients) + spread(cfg.base_slices - n_train, cfg.n_test_patients)


def _slug(name: str) -> str:
    return name.lower().replace("(", "").replace(")", "").replace("-", "")


def iter_samples(cfg: DatasetConfig):
    """Yield every ImageSample in manifest order."""
    counts = slices_per_patient(cfg)
    test_patients = set(range(cfg.n_patients - cfg.n_test_patients, cfg.n_patients))
    for patient, n_slices in enumerate(counts):
        split = "test" if patient in test_patients else "train"
        for s in range(n_slices):
            spec = make_phantom_spec(patient, s, cfg.seed)
            clean = generate_phantom(spec, cfg.size)
            for li, level in enumerate(LEVELS):
                pixels = degrade(clean, level, seed=[cfg.seed, patient, s, li, 1])
                oracle = oracle_scores(spec, level, seed=[cfg.seed, patient, s, li, 2], size=cfg.size)
                yield ImageSample(
                    id=f"p{patient:02d}_s{s:03d}_{_slug(level.name)}",
                    pixels=pixels,
                    level=level,
                    patient_id=patient,
                    lesion_present=spec.lesion is not None,
                    oracle=oracle,
                    caption=encode_scores(oracle),
                    split=split,
                )


def manifest_record(sample: ImageSample, path: str, seed: int) -> dict:
    return {
        "id": sample.id,
        "path": path,
        "patient": sample.patient_id,
        "level": sample.level.name,
        "lesion": sample.lesion_present,
        "scores": sample.oracle.as_list(),
        "caption": sample.caption,
        "split": sample.split,
        "seed": seed,
    }


def build_dataset(cfg: DatasetConfig) -> Path:
    """Write rasters and ``manifest.jsonl`` under ``cfg.out_dir``; returns the manifest path."""
    root = Path(cfg.out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    manifest = root / "manifest.jsonl"
    tmp = root / "manifest.jsonl.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for sample in iter_samples(cfg):
            rel = f"images/{sample.id}.ctiq"
            write_raster(root / rel, sample.pixels)
            fh.write(json.dumps(manifest_record(sample, rel, cfg.seed)) + "\n")
    os.replace(tmp, manifest)
    (root / "dataset.json").write_text(json.dumps({k: v for k, v in asdict(cfg).items() if k != "out_dir"}, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_split(manifest_path, split: str | None = None, limit: int | None = None):
    """Records and stacked (N, H, W) pixels for one split of a manifest."""
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    if split is not None:
        records = [r for r in records if r["split"] == split]
    if limit is not None:
        records = records[:limit]
    root = manifest_path.parent
    pixels = np.stack([read_raster(root / r["path"]) for r in records]) if records else np.zeros((0, 0, 0))
    return records, pixels


def record_scores(record: dict) -> ScoreVector:
    return ScoreVector.from_list(record["scores"])
