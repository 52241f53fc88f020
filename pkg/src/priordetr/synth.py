"""Synthetic ultrasound-like images with dark nodules of known geometry.

Nodule (aspect ratio, log width) pairs are drawn from a ground-truth
mixture, so a prior fitted on the emitted boxes can be checked against it.
Class 0 ("benign") is a smooth ellipse; class 1 ("malignant") has a lobulated
boundary and is slightly darker.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from scipy import ndimage

from . import gmm
from .autodiff.snapshot import load_tensor, save_tensor
from .gmm import GmmPrior2D

logger = logging.getLogger(__name__)


def default_geometry() -> GmmPrior2D:
    """Three nodule shapes for 64 px images: round, wide, tall-and-small."""
    return GmmPrior2D(
        weights=np.array([0.4, 0.35, 0.25]),
        means=np.array([[1.0, 2.75], [0.65, 3.05], [1.4, 2.35]]),
        covs=np.array([
            [[0.008, 0.0], [0.0, 0.012]],
            [[0.005, 0.0], [0.0, 0.010]],
            [[0.010, 0.0], [0.0, 0.010]],
        ]),
    )


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    min_nodules: int = 1
    max_nodules: int = 2
    geometry: GmmPrior2D = field(default_factory=default_geometry)
    speckle: float = 0.3
    blur: float = 1.0
    shadow_prob: float = 0.3
    shadow_strength: float = 0.35
    malignant_prob: float = 0.5
    seed: int = 0
    max_retries: int = 20

    def __post_init__(self):
        if self.height < 64 or self.width < 64:
            raise ValueError(f"images must be at least 64x64, got {self.height}x{self.width}")
        for name in ("shadow_prob", "malignant_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not 0 <= self.min_nodules <= self.max_nodules:
            raise ValueError("need 0 <= min_nodules <= max_nodules")
        if self.speckle < 0 or self.blur < 0:
            raise ValueError("speckle and blur must be non-negative")


@dataclass
class Sample:
    image: np.ndarray                 # (H, W) in [0, 1]
    boxes: np.ndarray                 # (n, 4) normalized cx cy w h
    labels: np.ndarray                # (n,) int
    id: int = 0

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def target(self) -> dict:
        return {"id": self.id, "boxes": self.boxes, "labels": self.labels,
                "height": self.height, "width": self.width}


def _shape_mask(H, W, cx, cy, w, h, lobes, rng) -> np.ndarray:
    """Boolean mask of pixels (centers at i + 0.5) inside the nodule outline."""
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    u = (xx - cx) / (w / 2)
    v = (yy - cy) / (h / 2)
    if lobes is None:
        return u * u + v * v <= 1.0
    amp, freq, phase = lobes
    theta = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    rho = 1 + amp * np.sin(freq * theta + phase)
    # normalize so the outline spans exactly [-1, 1] in both axes
    sx = np.abs(rho * np.cos(theta)).max()
    sy = np.abs(rho * np.sin(theta)).max()
    ang = np.arctan2(v * sy, u * sx)
    r = np.hypot(u * sx, v * sy)
    return r <= 1 + amp * np.sin(freq * ang + phase)


def _speckle(H, W, rng) -> np.ndarray:
    """Unit-mean correlated Rayleigh field."""
    re = ndimage.gaussian_filter(rng.standard_normal((H, W)), 0.7)
    im = ndimage.gaussian_filter(rng.standard_normal((H, W)), 0.7)
    env = np.hypot(re, im)
    return env / env.mean()


def _render(cfg: SynthConfig, rng: np.random.Generator, index: int) -> Sample:
    H, W = cfg.height, cfg.width
    bg = ndimage.gaussian_filter(rng.standard_normal((H, W)), 6.0)
    bg = 0.55 + 0.08 * bg / (np.abs(bg).max() + 1e-12)
    img = bg.copy()
    n = int(rng.integers(cfg.min_nodules, cfg.max_nodules + 1))
    occupied = np.zeros((H, W), bool)
    boxes, labels = [], []
    for _ in range(n):
        placed = False
        for _attempt in range(cfg.max_retries):
            r, logw = gmm.sample(cfg.geometry, rng, 1)[0]
            w = float(np.exp(logw))
            h = r * w
            if r <= 0 or w < 3 or h < 3 or w > W - 2 or h > H - 2:
                continue
            cx = rng.uniform(w / 2 + 1, W - w / 2 - 1)
            cy = rng.uniform(h / 2 + 1, H - h / 2 - 1)
            malignant = rng.random() < cfg.malignant_prob
            lobes = (rng.uniform(0.12, 0.22), int(rng.integers(4, 8)),
                     rng.uniform(0, 2 * np.pi)) if malignant else None
            mask = _shape_mask(H, W, cx, cy, w, h, lobes, rng)
            if not mask.any():
                continue
            grown = ndimage.binary_dilation(mask, iterations=2)
            if (grown & occupied).any():
                continue
            placed = True
            break
        if not placed:
            logger.warning("image %d: could not place nodule after %d tries; skipped",
                           index, cfg.max_retries)
            continue
        occupied |= mask
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        x1, x2 = cols[0], cols[-1] + 1
        y1, y2 = rows[0], rows[-1] + 1
        level = 0.12 if malignant else 0.22
        soft = mask.astype(np.float64)
        if cfg.blur > 0:
            soft = ndimage.gaussian_filter(soft, cfg.blur)
        img = img * (1 - soft) + level * soft
        if rng.random() < cfg.shadow_prob:
            band = np.zeros((H, W))
            band[y2:, x1:x2] = cfg.shadow_strength
            if cfg.blur > 0:
                band = ndimage.gaussian_filter(band, cfg.blur)
            img = img * (1 - band * ~occupied)
        boxes.append([(x1 + x2) / 2 / W, (y1 + y2) / 2 / H, (x2 - x1) / W, (y2 - y1) / H])
        labels.append(int(malignant))
    if cfg.speckle > 0:
        img = img * (1 + cfg.speckle * (_speckle(H, W, rng) - 1))
    img = np.clip(img, 0.0, 1.0)
    return Sample(img, np.array(boxes, dtype=np.float64).reshape(-1, 4),
                  np.array(labels, dtype=np.int64), id=index)


def generate(cfg: SynthConfig, n: int, start: int = 0) -> List[Sample]:
    """``n`` samples; sample i uses its own stream seeded by (seed, i)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [_render(cfg, np.random.default_rng([cfg.seed, i]), i)
            for i in range(start, start + n)]


# ---------------------------------------------------------------------------
# annotation files
# ---------------------------------------------------------------------------

PathLike = Union[str, os.PathLike]


def write_annotations(samples: List[Sample], path: PathLike,
                      image_dir: Optional[PathLike] = None) -> None:
    """JSON-lines annotations plus one binary tensor file per image."""
    path = Path(path)
    image_dir = Path(image_dir) if image_dir is not None else path.with_name(path.stem + "_images")
    if samples:
        image_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in samples:
            img_path = image_dir / f"{s.id:06d}.tnsr"
            save_tensor(img_path, s.image)
            rec = {
                "id": int(s.id), "height": s.height, "width": s.width,
                "boxes": [[float(v) for v in b] for b in s.boxes],
                "labels": [int(v) for v in s.labels],
                "image_file": os.path.relpath(img_path, path.parent),
            }
            fh.write(json.dumps(rec) + "\n")


def read_records(path: PathLike) -> List[dict]:
    """Parse the JSON-lines file without loading images."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                boxes = np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4)
                labels = np.asarray(rec["labels"], dtype=np.int64)
                rec["height"] = int(rec["height"])
                rec["width"] = int(rec["width"])
                if len(labels) != len(boxes):
                    raise ValueError(f"{len(boxes)} boxes but {len(labels)} labels")
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed annotation ({exc})") from exc
            rec["boxes"], rec["labels"] = boxes, labels
            out.append(rec)
    return out


def read_annotations(path: PathLike) -> List[Sample]:
    base = Path(path).parent
    samples = []
    for rec in read_records(path):
        img = load_tensor(base / rec["image_file"]) if rec.get("image_file") else \
            np.zeros((rec["height"], rec["width"]))
        samples.append(Sample(img, rec["boxes"], rec["labels"], id=int(rec.get("id", len(samples)))))
    return samples


def box_geometry(samples: List[Sample]) -> np.ndarray:
    """(r, log w) in pixels for every box of every sample."""
    ws, hs = [], []
    for s in samples:
        ws.extend(s.boxes[:, 2] * s.width)
        hs.extend(s.boxes[:, 3] * s.height)
    return gmm.boxes_to_samples(np.array(ws), np.array(hs))
