"""Image-folder ingestion and a deterministic synthetic texture generator.

Folder layout::

    root/{train,val}/{class_name}/{image}.png|.jpg

Class ids follow sorted class-name order across all splits.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "val")


@dataclass
class DatasetManifest:
    root: str
    classes: List[str]
    splits: Dict[str, List[Tuple[str, int]]]  # split -> [(relative path, class id)]
    image_size: Optional[int]
    checksum: str
    errors: List[Tuple[str, str]] = field(default_factory=list)  # (relative path, reason)

    def labels(self, split: str) -> np.ndarray:
        return np.array([lab for _, lab in self.splits[split]], dtype=np.int64)

    def __len__(self) -> int:
        return sum(len(v) for v in self.splits.values())

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        d["splits"] = {k: [tuple(e) for e in v] for k, v in d["splits"].items()}
        d["errors"] = [tuple(e) for e in d["errors"]]
        return cls(**d)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def scan_folder(root, image_size: Optional[int] = None, ignore_classes: Sequence[str] = ()) -> DatasetManifest:
    """Index ``root/{split}/{class}/*`` into a manifest.

    Unreadable files, non-square images and (when ``image_size`` is given)
    images of a different size are excluded and reported in ``errors``.
    Class directories listed in ``ignore_classes`` are skipped entirely.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    split_dirs = [root / s for s in SPLITS if (root / s).is_dir()]
    if not split_dirs:
        raise DataError(f"{root} has no {'/'.join(SPLITS)} sub-directories")

    ignore = set(ignore_classes)
    classes = sorted({d.name for s in split_dirs for d in s.iterdir() if d.is_dir() and d.name not in ignore})
    class_ids = {c: i for i, c in enumerate(classes)}

    splits: Dict[str, List[Tuple[str, int]]] = {}
    errors: List[Tuple[str, str]] = []
    digests: Dict[str, Tuple[str, str]] = {}
    h = hashlib.sha256()
    for sdir in split_dirs:
        entries = []
        for cname in classes:
            cdir = sdir / cname
            files = sorted(p for p in cdir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if cdir.is_dir() else []
            if cdir.is_dir() and not files:
                warnings.warn(f"empty class directory {cdir}", RuntimeWarning)
            for fp in files:
                rel = fp.relative_to(root).as_posix()
                try:
                    with Image.open(fp) as im:
                        im.load()
                        w, hgt = im.size
                except Exception as exc:  # PIL raises a zoo of exception types
                    errors.append((rel, f"unreadable: {exc}"))
                    continue
                if w != hgt:
                    errors.append((rel, f"non-square image {w}x{hgt}"))
                    continue
                if image_size is not None and w != image_size:
                    errors.append((rel, f"size {w} != expected {image_size}"))
                    continue
                digest = _file_digest(fp)
                if digest in digests and digests[digest][0] != sdir.name:
                    raise DataError(f"identical file in two splits: {digests[digest][1]} and {rel}")
                digests.setdefault(digest, (sdir.name, rel))
                entries.append((rel, class_ids[cname]))
                h.update(f"{rel}\0{class_ids[cname]}\0{digest}\n".encode())
        splits[sdir.name] = entries

    if not any(splits.values()):
        raise DataError(f"no usable images under {root} ({len(errors)} rejected)")
    for rel, reason in errors:
        log.warning("skipping %s: %s", rel, reason)
    return DatasetManifest(str(root), classes, splits, image_size, h.hexdigest(), errors)


def _read_image(path: Path, size: Optional[int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise DataError(f"missing image {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def load_batch(
    manifest: DatasetManifest,
    indices: Sequence[int],
    split: str = "train",
    size: Optional[int] = None,
    augment: bool = False,
    seed: int = 0,
) -> torch.Tensor:
    """Decode ``indices`` of ``split`` into a (B, H, W, 3) float batch in [0, 1]."""
    entries = manifest.splits[split]
    root = Path(manifest.root)
    imgs = [_read_image(root / entries[i][0], size) for i in indices]
    batch = torch.from_numpy(np.stack(imgs))
    if augment:
        batch = augment_batch(batch, torch.Generator().manual_seed(seed))
    return batch


def load_split(manifest: DatasetManifest, split: str, size: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    idx = range(len(manifest.splits[split]))
    images = load_batch(manifest, idx, split, size).numpy() if len(idx) else np.zeros((0, 0, 0, 3), np.float32)
    return images, manifest.labels(split)


def augment_batch(
    x: torch.Tensor,
    gen: torch.Generator,
    crop_scale: Optional[Tuple[float, float]] = (0.2, 1.0),
    flip_prob: float = 0.5,
) -> torch.Tensor:
    """Random resized crop (area fraction in ``crop_scale``, ratio 3/4..4/3) then horizontal flip.

    Operates on (B, H, W, C) batches; output keeps the input size.
    """
    B, H, W, C = x.shape
    out = []
    for i in range(B):
        img = x[i]
        if crop_scale is not None:
            area = H * W * float(torch.empty(1).uniform_(*crop_scale, generator=gen))
            log_ratio = float(torch.empty(1).uniform_(math.log(3 / 4), math.log(4 / 3), generator=gen))
            ratio = math.exp(log_ratio)
            cw = max(1, min(W, int(round(math.sqrt(area * ratio)))))
            ch = max(1, min(H, int(round(math.sqrt(area / ratio)))))
            top = int(torch.randint(0, H - ch + 1, (1,), generator=gen))
            left = int(torch.randint(0, W - cw + 1, (1,), generator=gen))
            crop = img[top : top + ch, left : left + cw].permute(2, 0, 1)[None]
            img = F.interpolate(crop, size=(H, W), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
        if float(torch.rand(1, generator=gen)) < flip_prob:
            img = img.flip(1)
        out.append(img)
    return torch.stack(out).clamp_(0.0, 1.0)


@dataclass
class SyntheticSpec:
    """Histology-flavoured texture classes.

    Class ``c`` draws a sinusoidal grating at orientation ``pi * c / num_classes``
    (random phase) and scatters dark "nuclei" blobs; the first half of the
    classes uses ``blob_density[0]`` blobs on average, the second half
    ``blob_density[1]``.  ``noise`` blends each image with uniform noise
    (1.0 = pure noise).
    """

    num_classes: int = 4
    per_class: int = 500
    size: int = 32
    frequency: float = 4.0  # grating cycles across the image
    orientation_jitter: float = 5.0  # degrees
    phase_jitter: float = 1.0  # fraction of a full period
    blob_density: Tuple[float, float] = (1.0, 10.0)
    noise: float = 0.3
    val_fraction: float = 0.2
    seed: int = 0


_PINK = np.array([0.93, 0.72, 0.84])
_PURPLE = np.array([0.33, 0.18, 0.52])


def synthesize(spec: SyntheticSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Generate ``(images uint8 (n, S, S, 3), labels, is_val)`` deterministically from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    S = spec.size
    yy, xx = np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64), indexing="ij")
    images, labels, is_val = [], [], []
    n_val = int(round(spec.per_class * spec.val_fraction))
    for c in range(spec.num_classes):
        density = spec.blob_density[0] if c < spec.num_classes / 2 else spec.blob_density[1]
        base = math.pi * c / spec.num_classes
        val_mask = np.zeros(spec.per_class, dtype=bool)
        val_mask[rng.permutation(spec.per_class)[:n_val]] = True
        for i in range(spec.per_class):
            theta = base + math.radians(spec.orientation_jitter) * rng.standard_normal()
            phase = rng.uniform(0, 2 * math.pi * spec.phase_jitter)
            proj = xx * math.cos(theta) + yy * math.sin(theta)
            grating = 0.5 + 0.5 * np.sin(2 * math.pi * spec.frequency * proj / S + phase)
            blobs = np.zeros((S, S))
            for _ in range(rng.poisson(density)):
                cy, cx = rng.uniform(0, S, size=2)
                r = rng.uniform(1.5, 3.0)
                blobs = np.maximum(blobs, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
            rgb = _PINK * (0.55 + 0.45 * grating)[..., None]
            rgb = rgb * (1 - blobs[..., None]) + _PURPLE * blobs[..., None]
            rgb = (1 - spec.noise) * rgb + spec.noise * rng.uniform(0, 1, size=rgb.shape)
            images.append(np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8))
            labels.append(c)
            is_val.append(val_mask[i])
    return np.stack(images), np.array(labels, dtype=np.int64), np.array(is_val)


def generate_synthetic(spec: SyntheticSpec, out) -> DatasetManifest:
    """Write the synthetic dataset as PNGs under ``out`` and return its manifest."""
    out = Path(out)
    images, labels, is_val = synthesize(spec)
    counters: Dict[Tuple[str, int], int] = {}
    try:
        for img, lab, v in zip(images, labels, is_val):
            split = "val" if v else "train"
            k = counters.get((split, lab), 0)
            counters[(split, lab)] = k + 1
            d = out / split / f"class_{lab:02d}"
            d.mkdir(parents=True, exist_ok=True)
            Image.fromarray(img).save(d / f"img_{k:05d}.png")
    except OSError as exc:
        raise DataError(f"could not write synthetic dataset to {out}: {exc}") from exc
    (out / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=1, sort_keys=True))
    manifest = scan_folder(out, image_size=spec.size)
    manifest.save(out / "manifest.json")
    return manifest


def as_float_images(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / 255.0 if images.dtype == np.uint8 else images.astype(np.float32)


def pixel_logistic_oracle(
    train_x: np.ndarray, train_y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray, C: float = 1.0
) -> float:
    """Validation accuracy of a multinomial logistic regression on raw pixels."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    tx = as_float_images(train_x).reshape(len(train_x), -1)
    vx = as_float_images(val_x).reshape(len(val_x), -1)
    scaler = StandardScaler().fit(tx)
    clf = LogisticRegression(C=C, max_iter=2000)
    clf.fit(scaler.transform(tx), train_y)
    return float((clf.predict(scaler.transform(vx)) == val_y).mean())
