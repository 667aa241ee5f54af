"""Dataset ingestion, preprocessing, augmentation, folds and synthetic data.

On-disk layout (read by ``load_dataset``, written by ``synth_generate``)::

    root/jet/<id>.png     8-bit RGB pseudo-color birefringence rendering
    root/rgb/<id>.png     8-bit RGB camera image
    root/masks/<id>.png   8-bit mask, any value > 0 is foreground
    root/labels.csv       header ``id,has_nerve``; one row per id, has_nerve in {0, 1}
"""

import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

MODALITIES = ("jet", "rgb")
IMAGE_SIZE = 256


@dataclass
class SamplePair:
    id: str
    jet: np.ndarray   # (H, W, 3) uint8
    rgb: np.ndarray   # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    has_nerve: bool

    def __post_init__(self):
        if self.jet.shape[:2] != self.mask.shape or self.rgb.shape[:2] != self.mask.shape:
            raise ValueError(f"sample {self.id}: modalities and mask are not pixel-aligned")


@dataclass
class LoadReport:
    loaded: list = field(default_factory=list)
    skipped: dict = field(default_factory=dict)   # id -> missing streams
    binarized: list = field(default_factory=list)  # ids whose mask was not {0,1} or {0,255}


def _read_png(path, mode):
    try:
        with Image.open(path) as im:
            return np.array(im.convert(mode))
    except Exception as exc:  # PIL raises several unrelated types
        raise OSError(f"cannot read image {path}: {exc}") from exc


def read_labels(path):
    labels = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"id", "has_nerve"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: labels file needs an 'id,has_nerve' header")
        for row in reader:
            labels[row["id"]] = row["has_nerve"].strip().lower() in ("1", "true", "yes")
    return labels


def load_dataset(root, return_report=False):
    """Loads every id present in all of jet/, rgb/ and masks/.

    Ids missing a stream are skipped and listed in the report. Masks are
    binarized by ``> 0``; anything other than {0, 1} or {0, 255} also logs a
    warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    stems = {}
    for sub in ("jet", "rgb", "masks"):
        d = root / sub
        stems[sub] = {p.stem for p in d.glob("*.png")} if d.is_dir() else set()
    all_ids = set().union(*stems.values())
    report = LoadReport()
    labels_path = root / "labels.csv"
    labels = read_labels(labels_path) if labels_path.exists() else {}

    pairs = []
    for sid in sorted(all_ids):
        missing = [s for s in ("jet", "rgb", "masks") if sid not in stems[s]]
        if missing:
            report.skipped[sid] = missing
            log.warning("skipping %s: missing %s", sid, ", ".join(missing))
            continue
        jet = _read_png(root / "jet" / f"{sid}.png", "RGB")
        rgb = _read_png(root / "rgb" / f"{sid}.png", "RGB")
        raw = _read_png(root / "masks" / f"{sid}.png", "L")
        if not (np.isin(raw, (0, 1)).all() or np.isin(raw, (0, 255)).all()):
            report.binarized.append(sid)
            log.warning("mask %s has values outside {0,1}; binarizing with > 0", sid)
        mask = (raw > 0).astype(np.uint8)
        if sid in labels:
            has_nerve = labels[sid]
        else:
            has_nerve = bool(mask.any())
            log.warning("no label for %s; inferring has_nerve=%s from the mask", sid, has_nerve)
        pairs.append(SamplePair(sid, jet, rgb, mask, has_nerve))
        report.loaded.append(sid)
    if return_report:
        return pairs, report
    return pairs


# ---------------------------------------------------------------- preprocessing

@dataclass
class NormalizationStats:
    jet_mean: np.ndarray
    jet_std: np.ndarray
    rgb_mean: np.ndarray
    rgb_std: np.ndarray

    def mean(self, modality):
        return getattr(self, f"{modality}_mean")

    def std(self, modality):
        return getattr(self, f"{modality}_std")

    def to_dict(self):
        return {k: [float(v) for v in getattr(self, k)] for k in ("jet_mean", "jet_std", "rgb_mean", "rgb_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def resize_and_scale(pair, size=IMAGE_SIZE):
    """Bilinear-resized images scaled to [0, 1] as (3, size, size) float32, plus a
    nearest-resized (1, size, size) uint8 mask."""
    if pair.mask.size == 0:
        raise ValueError(f"sample {pair.id} has zero area")
    out = []
    for img in (pair.jet, pair.rgb):
        if img.shape[:2] != (size, size):
            img = np.array(Image.fromarray(img).resize((size, size), Image.BILINEAR))
        out.append(img.astype(np.float32).transpose(2, 0, 1) / 255.0)
    mask = pair.mask
    if mask.shape != (size, size):
        mask = np.array(Image.fromarray(mask).resize((size, size), Image.NEAREST))
    return out[0], out[1], mask[None].astype(np.uint8)


def compute_stats(scaled):
    """Per-modality channel mean/std over (jet, rgb, mask) triples scaled to [0, 1]."""
    if not scaled:
        raise ValueError("cannot compute normalization stats from an empty set")
    result = {}
    for i, name in enumerate(MODALITIES):
        stack = np.stack([t[i] for t in scaled]).astype(np.float64)
        mean = stack.mean(axis=(0, 2, 3))
        std = stack.std(axis=(0, 2, 3))
        if np.any(std <= 0):
            raise ValueError(f"{name} has a constant channel; standard deviation is zero")
        result[f"{name}_mean"] = mean
        result[f"{name}_std"] = std
    return NormalizationStats(**result)


def standardize(img, mean, std):
    mean = np.asarray(mean, dtype=np.float64)[:, None, None]
    std = np.asarray(std, dtype=np.float64)[:, None, None]
    return ((img - mean) / std).astype(np.float32)


def preprocess(pair, stats, size=IMAGE_SIZE):
    jet, rgb, mask = resize_and_scale(pair, size)
    return (standardize(jet, stats.jet_mean, stats.jet_std),
            standardize(rgb, stats.rgb_mean, stats.rgb_std),
            mask)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    brightness: float = 0.2   # multiplicative, factor in [1 - b, 1 + b]
    contrast: float = 0.2     # factor in [1 - c, 1 + c] about the image mean
    noise_sigma: float = 0.02


def sample_rng(seed, sample_id):
    """Per-sample generator derived from (seed, id) so order and parallelism never matter."""
    return np.random.default_rng([int(seed), zlib.crc32(str(sample_id).encode())])


def _brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0).astype(np.float32)


def _contrast(img, factor):
    m = img.mean(axis=(1, 2), keepdims=True)
    return np.clip((img - m) * factor + m, 0.0, 1.0).astype(np.float32)


def vflip(x):
    return np.ascontiguousarray(x[..., ::-1, :])


def hflip(x):
    return np.ascontiguousarray(x[..., :, ::-1])


def rot90(x, k):
    return np.ascontiguousarray(np.rot90(x, k, axes=(-2, -1)))


def augment(jet, rgb, mask, rng, cfg=None):
    """Four augmented copies of a [0, 1]-scaled triple.

    1. vertical flip + brightness     (mask flipped)
    2. horizontal flip + contrast     (mask flipped)
    3. rotation by k*90, k in {1,2,3} (mask rotated)
    4. Gaussian noise                 (mask untouched)

    Jet and RGB share every random draw. Returns a list of dicts with the
    triple and the parameters that produced it.
    """
    cfg = cfg or AugmentConfig()
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    k = int(rng.integers(1, 4))
    noise_j = rng.normal(0.0, cfg.noise_sigma, size=jet.shape).astype(np.float32)
    noise_r = rng.normal(0.0, cfg.noise_sigma, size=rgb.shape).astype(np.float32)
    return [
        {"kind": "vflip_brightness", "factor": b,
         "jet": _brightness(vflip(jet), b), "rgb": _brightness(vflip(rgb), b), "mask": vflip(mask)},
        {"kind": "hflip_contrast", "factor": c,
         "jet": _contrast(hflip(jet), c), "rgb": _contrast(hflip(rgb), c), "mask": hflip(mask)},
        {"kind": "rot90", "k": k,
         "jet": rot90(jet, k), "rgb": rot90(rgb, k), "mask": rot90(mask, k)},
        {"kind": "noise", "sigma": cfg.noise_sigma,
         "jet": np.clip(jet + noise_j, 0, 1), "rgb": np.clip(rgb + noise_r, 0, 1), "mask": mask.copy()},
    ]


# ---------------------------------------------------------------- folds

@dataclass
class FoldSplit:
    fold_id: int
    train_ids: list
    val_ids: list


def make_folds(ids, k=5, seed=0):
    if k < 2:
        raise ValueError("k must be at least 2")
    ids = list(ids)
    if len(ids) < k:
        raise ValueError(f"need at least k={k} ids, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    parts = np.array_split(order, k)
    folds = []
    for i, part in enumerate(parts):
        val = {int(j) for j in part}
        folds.append(FoldSplit(i, [ids[j] for j in order if j not in val], [ids[j] for j in part]))
    return folds


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    empty_fraction: float = 0.2
    distractors: tuple = (1, 2)      # inclusive range of distractor ridges per image
    band_width: float = 0.035        # half-width as a fraction of the image size
    rgb_tint: float = 0.12           # target band tint strength in the RGB rendering
    rgb_blobs: int = 2               # tinted, untextured look-alike blobs in the RGB rendering


def _bezier_curve(rng, size, n_points=400):
    """Random cubic Bezier entering and leaving through different borders."""
    def border_point(side):
        t = rng.uniform(0.15, 0.85) * (size - 1)
        return [(t, 0.0), (size - 1.0, t), (t, size - 1.0), (0.0, t)][side]

    s0, s1 = rng.choice(4, size=2, replace=False)
    p0, p3 = np.array(border_point(s0)), np.array(border_point(s1))
    p1, p2 = rng.uniform(0.2, 0.8, size=(2, 2)) * (size - 1)
    t = np.linspace(0.0, 1.0, n_points)[:, None]
    return ((1 - t) ** 3) * p0 + 3 * ((1 - t) ** 2) * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3


def _distance_to_curve(points, size):
    raster = np.ones((size, size), dtype=bool)
    xy = np.clip(np.rint(points).astype(int), 0, size - 1)
    raster[xy[:, 1], xy[:, 0]] = False
    return ndimage.distance_transform_edt(raster)


def _smooth_noise(rng, size, sigma, channels=None):
    shape = (size, size) if channels is None else (size, size, channels)
    field_ = rng.normal(size=shape)
    axes_sigma = (sigma, sigma) if channels is None else (sigma, sigma, 0)
    field_ = ndimage.gaussian_filter(field_, axes_sigma)
    return field_ / (np.abs(field_).max() + 1e-12)


def _jet_colormap(values):
    from matplotlib import colormaps

    return (colormaps["jet"](np.clip(values, 0, 1))[..., :3] * 255).astype(np.uint8)


def render_sample(rng, size, has_nerve, cfg=None):
    """Returns (jet, rgb, mask) for one synthetic sample.

    Jet: the target band and 1-2 distractor ridges drawn from the same curve
    distribution at the same intensity, over smooth clutter, so the jet image
    alone cannot tell the target from look-alikes. RGB: tissue-colored
    background with shading and look-alike tinted blobs; only the target band
    carries both the tint and a fine striated texture, with soft boundaries.
    """
    cfg = cfg or SynthConfig()
    half_width = max(cfg.band_width * size, 1.5)

    ridge = np.zeros((size, size))
    target_dist = None
    if has_nerve:
        target_dist = _distance_to_curve(_bezier_curve(rng, size), size)
        ridge = np.maximum(ridge, np.clip(1.0 - (target_dist / half_width) ** 2, 0, None))
    n_distract = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    for _ in range(n_distract):
        d = _distance_to_curve(_bezier_curve(rng, size), size)
        ridge = np.maximum(ridge, np.clip(1.0 - (d / half_width) ** 2, 0, None))

    clutter = 0.3 + 0.12 * _smooth_noise(rng, size, size / 16)
    jet_field = np.maximum(clutter, 0.25 + 0.65 * np.sqrt(ridge))
    jet_field += rng.normal(0, 0.015, size=(size, size))
    jet = _jet_colormap(jet_field)

    base = np.array([0.72, 0.45, 0.42])
    shade = 0.08 * _smooth_noise(rng, size, size / 8)[..., None]
    rgb = base + shade + 0.03 * rng.normal(size=(size, size, 3))
    tint = np.array([0.6, 1.0, 0.9]) * cfg.rgb_tint
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(cfg.rgb_blobs):
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(0.05, 0.12) * size
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        rgb = rgb + blob[..., None] * tint
    if has_nerve:
        soft = np.exp(-(target_dist / (1.3 * half_width)) ** 2)
        period = max(size / 32, 2.0)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy) / period)
        rgb = rgb + soft[..., None] * (tint + 0.06 * (stripes[..., None] - 0.5))
    rgb = (np.clip(rgb, 0, 1) * 255).astype(np.uint8)

    if has_nerve:
        mask = (target_dist <= half_width).astype(np.uint8)
    else:
        mask = np.zeros((size, size), dtype=np.uint8)
    return jet, rgb, mask


def synth_generate(out_dir, n, size=IMAGE_SIZE, seed=0, cfg=None):
    """Writes ``n`` synthetic paired samples in the standard layout; returns the ids."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 64:
        raise ValueError("size must be >= 64")
    cfg = cfg or SynthConfig()
    out = Path(out_dir)
    for sub in ("jet", "rgb", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n_empty = int(round(cfg.empty_fraction * n))
    empty = set(np.random.default_rng([seed, 0x5EED]).choice(n, size=n_empty, replace=False).tolist())
    ids, rows = [], []
    for i in range(n):
        sid = f"s{i:04d}"
        rng = np.random.default_rng([seed, i])
        has_nerve = i not in empty
        jet, rgb, mask = render_sample(rng, size, has_nerve, cfg)
        if has_nerve and not mask.any():
            has_nerve = False
        Image.fromarray(jet).save(out / "jet" / f"{sid}.png")
        Image.fromarray(rgb).save(out / "rgb" / f"{sid}.png")
        Image.fromarray(mask * 255).save(out / "masks" / f"{sid}.png")
        ids.append(sid)
        rows.append((sid, int(has_nerve)))
    with open(out / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "has_nerve"])
        w.writerows(rows)
    return ids
