"""Synthetic disease-image generator, protocol splitters, directory ingestion.

Images are composed from three ingredients tied to the class hierarchy: a
green-dominant base texture whose orientation and frequency follow the coarse
and medium labels, a red-dominant lesion pattern whose geometry follows the
fine label and whose pixel coverage equals the sampled severity, and a
background (flat or cluttered) outside a fixed elliptical foreground. Red
never exceeds green on healthy tissue and always does on lesions, so lesion
coverage can be measured back from the pixels alone. Every image is a pure
function of (spec, class index, sample index), which keeps generation
deterministic and order-independent.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .taxonomy import Taxonomy

log = logging.getLogger(__name__)

BACKGROUNDS = ("simple", "complex", "mixed")
SEVERITY_BINS = ((0.0, 0.25), (0.25, 0.60), (0.60, 1.0))
SEVERITY_BIN_NAMES = ("early", "mid", "late")

# 15 leaf classes over 3 pathogen types; the first 9 serve as base classes for
# pretraining and meta-training, the last 6 stay novel for few-shot evaluation.
DISEASE_TREE = {
    "common_rust": ("fungal", "rust", "common_rust"),
    "southern_rust": ("fungal", "rust", "southern_rust"),
    "powdery_mildew": ("fungal", "mildew", "powdery_mildew"),
    "bacterial_spot": ("bacterial", "spot", "bacterial_spot"),
    "angular_spot": ("bacterial", "spot", "angular_spot"),
    "citrus_canker": ("bacterial", "canker", "citrus_canker"),
    "common_mosaic": ("viral", "mosaic", "common_mosaic"),
    "yellow_mosaic": ("viral", "mosaic", "yellow_mosaic"),
    "leaf_curl": ("viral", "curl", "leaf_curl"),
    "downy_mildew": ("fungal", "mildew", "downy_mildew"),
    "early_blight": ("fungal", "blight", "early_blight"),
    "stem_canker": ("bacterial", "canker", "stem_canker"),
    "bacterial_wilt": ("bacterial", "wilt", "bacterial_wilt"),
    "crumple_virus": ("viral", "curl", "crumple_virus"),
    "brown_streak": ("viral", "streak", "brown_streak"),
}
BASE_CLASSES = tuple(list(DISEASE_TREE)[:9])
NOVEL_CLASSES = tuple(list(DISEASE_TREE)[9:])


def default_taxonomy() -> Taxonomy:
    tax = Taxonomy(classes=dict(DISEASE_TREE))
    tax.validate()
    return tax


@dataclass(frozen=True)
class GenSpec:
    """Recipe for one synthetic dataset."""

    classes: tuple[str, ...] = tuple(DISEASE_TREE)
    taxonomy: Taxonomy = field(default_factory=default_taxonomy)
    image_size: int = 32
    severity_range: tuple[float, float] = (0.05, 0.95)
    background: str = "mixed"
    illumination: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise ConfigError("need at least 2 classes")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        lo, hi = self.severity_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"severity_range {self.severity_range} outside [0, 1]")
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"background must be one of {BACKGROUNDS}")
        if self.illumination < 0:
            raise ConfigError("illumination jitter must be >= 0")
        missing = [c for c in self.classes if c not in self.taxonomy.classes]
        if missing:
            raise ConfigError(f"classes missing from taxonomy: {missing}")
        self.taxonomy.validate()


@dataclass
class Dataset:
    """Images in (N, 3, S, S) float32 with integer labels and factor metadata."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    meta: tuple[dict, ...]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx],
            class_names=self.class_names,
            meta=tuple(self.meta[int(i)] for i in idx),
        )

    def class_indices(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]


def foreground_mask(size: int) -> np.ndarray:
    """Fixed elliptical leaf region; reconstructible without metadata."""
    ys, xs = np.mgrid[0:size, 0:size]
    cy = cx = (size - 1) / 2.0
    ry, rx = 0.42 * size, 0.46 * size
    return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0


def _class_params(spec: GenSpec, class_name: str) -> dict:
    tax = spec.taxonomy
    coarse = tax.level_label(class_name, "coarse")
    coarse_ids = sorted({v[0] for v in tax.classes.values()})
    ci = coarse_ids.index(coarse)
    fi = sorted(tax.classes).index(class_name)
    return {
        "angle": ci * (math.pi / max(len(coarse_ids), 1)) + 0.12 * (fi % 5),
        "freq": 2.0 + 0.5 * fi,
        "phase": 0.9 * fi,
        "green": 0.52 + 0.09 * ci + 0.02 * (fi % 3),
        "checker": 0.2 + 0.12 * (fi % 3),
        "lesion_kind": fi % 6,
        "lesion_seed": fi,
        "lesion_red": 0.60 + 0.03 * (fi % 4),
    }


def _lesion_field(
    kind: int, seed: int, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Low values mark lesion-prone pixels.

    The shape family and its placement are fixed per class (seeded by the
    class, not the image) so growing severity inflates a stable per-class
    pattern; the image rng only adds a small positional jitter.
    """
    anchor = np.random.default_rng([911, seed])
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    wobble = rng.uniform(-0.03, 0.03, 2)
    u, v = ys / size + wobble[0], xs / size + wobble[1]
    if kind == 0:  # scattered blobs
        centers = anchor.uniform(0.15, 0.85, (4, 2))
        return np.min([(u - c[0]) ** 2 + (v - c[1]) ** 2 for c in centers], axis=0)
    if kind == 1:  # ring
        c = anchor.uniform(0.42, 0.58, 2)
        r = np.sqrt((u - c[0]) ** 2 + (v - c[1]) ** 2)
        return np.abs(r - anchor.uniform(0.2, 0.3))
    if kind == 2:  # parallel stripes
        ang = anchor.uniform(0, math.pi)
        t = u * math.cos(ang) + v * math.sin(ang)
        return 0.5 + 0.5 * np.sin(2 * math.pi * 5 * t + anchor.uniform(0, 6.28))
    if kind == 3:  # blotch grid
        ph = anchor.uniform(0, 6.28, 2)
        return (0.5 + 0.5 * np.sin(2 * math.pi * 3 * u + ph[0])) * (
            0.5 + 0.5 * np.sin(2 * math.pi * 3 * v + ph[1])
        )
    if kind == 4:  # diagonal band
        return np.abs(u - v + anchor.uniform(-0.2, 0.2))
    # kind 5: angular wedges
    c = anchor.uniform(0.45, 0.55, 2)
    theta = np.arctan2(u - c[0], v - c[1])
    return 0.5 + 0.5 * np.sin(3 * theta + anchor.uniform(0, 6.28))


def _render(spec: GenSpec, class_idx: int, sample_idx: int) -> tuple[np.ndarray, dict]:
    size = spec.image_size
    rng = np.random.default_rng([spec.seed, class_idx, sample_idx])
    p = _class_params(spec, spec.classes[class_idx])
    fg = foreground_mask(size)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    u, v = ys / size, xs / size
    t = u * math.cos(p["angle"]) + v * math.sin(p["angle"])
    t2 = u * math.sin(p["angle"]) - v * math.cos(p["angle"])
    jitter = rng.uniform(-0.15, 0.15)
    tex = 0.5 + 0.35 * np.sin(2 * math.pi * p["freq"] * t + p["phase"] + jitter)
    tex2 = 0.5 + 0.5 * np.sin(2 * math.pi * 3.0 * p["freq"] * t2 + 2 * p["phase"])

    g = np.clip(p["green"] * (0.55 + 0.8 * tex), 0.4, 0.95)
    r = g * (0.35 + 0.25 * tex2)  # r <= 0.6 g: green stays dominant
    b = g * (0.30 + 0.15 * p["checker"] * tex)

    lo, hi = spec.severity_range
    severity = float(rng.uniform(lo, hi))
    n_fg = int(fg.sum())
    n_lesion = int(round(severity * n_fg))
    lesion = np.zeros_like(fg)
    if n_lesion > 0:
        fld = _lesion_field(p["lesion_kind"], p["lesion_seed"], size, rng)
        cut = np.partition(fld[fg], n_lesion - 1)[n_lesion - 1]
        lesion = fg & (fld <= cut)
    red = p["lesion_red"] + 0.1 * rng.uniform(-1, 1)
    r = np.where(lesion, red, r)
    g = np.where(lesion, red - 0.25, g)
    b = np.where(lesion, 0.18, b)

    if spec.background == "mixed":
        background = "simple" if rng.uniform() < 0.5 else "complex"
    else:
        background = spec.background
    img = np.stack([r, g, b])
    if background == "simple":
        bg = np.array([0.22, 0.26, 0.42])[:, None, None] * np.ones((3, size, size))
        illum = 1.0
    else:
        blob = np.zeros((size, size))
        for _ in range(6):
            cyx = rng.uniform(0, size, 2)
            rad = rng.uniform(0.1, 0.3) * size
            d2 = (ys - cyx[0]) ** 2 + (xs - cyx[1]) ** 2
            blob += np.exp(-d2 / (2 * rad**2)) * rng.uniform(0.3, 1.0)
        blob = blob / max(blob.max(), 1e-6)
        bg = np.stack(
            [
                0.15 + 0.45 * blob + rng.normal(0, 0.08, (size, size)),
                0.18 + 0.30 * blob + rng.normal(0, 0.08, (size, size)),
                0.35 + 0.40 * blob + rng.normal(0, 0.08, (size, size)),
            ]
        )
        illum = float(1.0 + rng.uniform(-spec.illumination, spec.illumination))
    img = np.where(fg[None], img, bg) * illum
    img = img + rng.normal(0, 0.02, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    meta = {
        "class": spec.classes[class_idx],
        "severity": round(severity, 6),
        "background": background,
        "illumination": round(illum, 6),
        "size": size,
    }
    return img, meta


def generate_dataset(spec: GenSpec, per_class: int) -> Dataset:
    """Render per_class images for every class in the spec."""
    spec.validate()
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    images, labels, meta = [], [], []
    for ci in range(len(spec.classes)):
        for si in range(per_class):
            img, m = _render(spec, ci, si)
            images.append(img)
            labels.append(ci)
            meta.append(m)
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=tuple(spec.classes),
        meta=tuple(meta),
    )


def measured_severity(images: np.ndarray) -> np.ndarray:
    """Lesion pixel fraction recovered from pixels: red over green inside the leaf."""
    fg = foreground_mask(images.shape[-1])
    inside = images[:, :, fg]
    return (inside[:, 0] > inside[:, 1]).mean(axis=1)


def resample(images: np.ndarray, size: int) -> np.ndarray:
    x = torch.as_tensor(images)
    out = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return out.numpy().astype(np.float32)


def split_protocol(
    ds: Dataset,
    protocol: str,
    resolution_factors: tuple[float, ...] = (0.5, 2.0),
) -> tuple[Dataset, dict[str, Dataset]]:
    """Carve train and evaluation pools along one deployment factor.

    domain-shift trains on simple backgrounds and evaluates on cluttered ones;
    multi-resolution keeps the train pool and adds resampled evaluation
    copies; severity trains below 25% coverage and evaluates on the mid and
    late bins, boundaries left-closed right-open.
    """
    needed = {"domain-shift": "background", "multi-resolution": "size", "severity": "severity"}
    factor = needed.get(protocol)
    if factor and any(factor not in m for m in ds.meta):
        raise ConfigError(f"dataset metadata lacks the {factor!r} factor needed by {protocol}")
    if protocol == "domain-shift":
        bgs = np.array([m["background"] for m in ds.meta])
        train = ds.subset(np.nonzero(bgs == "simple")[0])
        evals = {"complex": ds.subset(np.nonzero(bgs == "complex")[0])}
        empties = [k for k, v in {"simple": train, **evals}.items() if len(v) == 0]
        if empties:
            raise ConfigError(
                f"domain-shift split found no images with background in {empties}"
            )
        return train, evals
    if protocol == "multi-resolution":
        size = int(ds.meta[0]["size"])
        evals = {}
        for f in resolution_factors:
            s = int(round(size * f))
            copy = Dataset(
                images=resample(ds.images, s),
                labels=ds.labels.copy(),
                class_names=ds.class_names,
                meta=tuple({**m, "size": s} for m in ds.meta),
            )
            evals[f"res_{s}"] = copy
        return ds, evals
    if protocol == "severity":
        sev = np.array([m["severity"] for m in ds.meta])
        pools = {}
        for name, (lo, hi) in zip(SEVERITY_BIN_NAMES, SEVERITY_BINS):
            inbin = (sev >= lo) & ((sev < hi) if hi < 1.0 else (sev <= 1.0))
            pools[name] = ds.subset(np.nonzero(inbin)[0])
        empty = [
            f"{name} [{lo}, {hi})"
            for name, (lo, hi) in zip(SEVERITY_BIN_NAMES, SEVERITY_BINS)
            if len(pools[name]) == 0
        ]
        if empty:
            raise ConfigError(f"severity split produced empty pools: {empty}")
        return pools["early"], {"mid": pools["mid"], "late": pools["late"]}
    raise ConfigError(
        f"unknown protocol {protocol!r}; expected domain-shift, multi-resolution, severity"
    )


def dataset_manifest(ds: Dataset) -> dict:
    digest = hashlib.sha256(np.ascontiguousarray(ds.images).tobytes()).hexdigest()
    return {
        "num_images": len(ds),
        "class_names": list(ds.class_names),
        "labels": ds.labels.tolist(),
        "meta": list(ds.meta),
        "content_sha256": digest,
    }


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(directory / "images.npz", images=ds.images, labels=ds.labels)
    manifest = dataset_manifest(ds)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory / "manifest.json"


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    arrays = np.load(directory / "images.npz")
    manifest = json.loads((directory / "manifest.json").read_text())
    return Dataset(
        images=arrays["images"],
        labels=arrays["labels"],
        class_names=tuple(manifest["class_names"]),
        meta=tuple(manifest["meta"]),
    )


def ingest_directory(
    root: str | Path, image_size: int = 32, seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Load class-named image folders into stratified 80/10/10 train/val/test."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if len(class_dirs) < 2:
        raise ConfigError("need at least 2 class subdirectories")
    names = tuple(d.name for d in class_dirs)
    per_split: dict[str, list] = {k: [] for k in ("train", "val", "test")}
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.is_file())
        items = []
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(
                        im.convert("RGB").resize((image_size, image_size)),
                        dtype=np.float32,
                    )
            except Exception as err:  # noqa: BLE001 - skip-and-log contract
                log.warning("skipping unreadable image %s: %s", f, err)
                continue
            items.append((np.transpose(arr / 255.0, (2, 0, 1)), str(f)))
        if not items:
            raise ConfigError(f"class directory {d} has no readable images")
        order = np.random.default_rng([seed, label]).permutation(len(items))
        n = len(items)
        n_val = max(1, int(round(0.1 * n))) if n >= 3 else 0
        n_test = max(1, int(round(0.1 * n))) if n >= 3 else 0
        buckets = (
            ("val", order[:n_val]),
            ("test", order[n_val : n_val + n_test]),
            ("train", order[n_val + n_test :]),
        )
        for split, idx in buckets:
            for i in idx:
                img, path = items[int(i)]
                per_split[split].append(
                    (img, label, {"class": names[label], "source": path, "size": image_size})
                )
    out = []
    for split in ("train", "val", "test"):
        rows = per_split[split]
        out.append(
            Dataset(
                images=np.stack([r[0] for r in rows]) if rows else np.zeros((0, 3, image_size, image_size), np.float32),
                labels=np.asarray([r[1] for r in rows], dtype=np.int64),
                class_names=names,
                meta=tuple(r[2] for r in rows),
            )
        )
    return tuple(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flip and shift; config-gated training-time option."""
    out = images.copy()
    n, _, h, w = out.shape
    flip = rng.uniform(size=n) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    shifts = rng.integers(-pad, pad + 1, size=(n, 2))
    for i in range(n):
        out[i] = np.roll(out[i], tuple(shifts[i]), axis=(1, 2))
    return out
