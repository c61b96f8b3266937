"""Synthetic magnetogram corpus with planted bipolar blobs.

Each image is Gaussian background noise around mid-gray plus a handful of
bipolar blobs (adjacent positive/negative Gaussian lobes standing in for
active regions). Every image designates a "driver" blob - its strongest -
whose amplitude exceeds a fixed threshold exactly on FL images, so the
binary task is learnable by construction and the driver's bounding box
gives ground truth for attention-locality checks. Blob position also
yields a synthetic heliographic longitude for stratified verification.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .data import (
    DatasetManifest,
    MagnetogramSample,
    assign_partition,
    flux_to_class,
    render_timestamp,
    write_manifest,
)
from .errors import ConfigError, GenerationError
from .pgm import write_pgm

#: driver amplitudes (8-bit levels) straddle this threshold by label
AMP_THRESHOLD = 95.0


@dataclass(frozen=True)
class SynthConfig:
    samples: int = 2600
    side: int = 64
    fl_ratio: float = 1.0 / 6.0
    blobs_min: int = 3
    blobs_max: int = 6
    noise_sigma: float = 4.0
    background: float = 128.0
    driver_amp_fl: Tuple[float, float] = (105.0, 125.0)
    driver_amp_nf: Tuple[float, float] = (55.0, 85.0)
    other_amp: Tuple[float, float] = (30.0, 50.0)
    sigma_frac: Tuple[float, float] = (0.035, 0.05)
    start_year: int = 2012
    seed: int = 0

    def __post_init__(self):
        if self.side < 32:
            raise ConfigError(f"side must be >= 32, got {self.side}")
        if not (0.0 < self.fl_ratio < 1.0):
            raise ConfigError(f"fl_ratio must be in (0, 1), got {self.fl_ratio}")
        if self.samples < 12:
            raise ConfigError("need at least 12 samples to span all months")
        if not (1 <= self.blobs_min <= self.blobs_max):
            raise ConfigError("blob count range invalid")
        if self.driver_amp_fl[0] <= AMP_THRESHOLD:
            raise ConfigError("FL driver amplitudes must exceed the threshold")
        if self.driver_amp_nf[1] >= AMP_THRESHOLD:
            raise ConfigError("NF driver amplitudes must stay below the threshold")


@dataclass(frozen=True)
class BlobBox:
    """Pixel bounding box, upper bounds exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    def as_list(self) -> List[int]:
        return [self.x0, self.y0, self.x1, self.y1]


def _sample_timestamp(cfg: SynthConfig, i: int) -> datetime:
    """Deterministic on-the-hour timestamps cycling through all 12 months."""
    month = i % 12 + 1
    seq = i // 12
    day = 1 + seq % 28
    hour = (seq // 28) % 24
    year = cfg.start_year + seq // (28 * 24)
    return datetime(year, month, day, hour, tzinfo=timezone.utc)


def _place_blobs(rng: np.random.Generator, cfg: SynthConfig, count: int):
    """Rejection-sample blob geometry: centers stay inside the frame and
    apart from each other; bounded retries guard против impossible configs."""
    placed = []  # (cx, cy, sigma, half)
    for _ in range(count):
        for attempt in range(200):
            sigma = rng.uniform(*cfg.sigma_frac) * cfg.side
            half = math.ceil(2.5 * sigma + 1.2 * sigma)
            lo, hi = half, cfg.side - 1 - half
            if lo >= hi:
                raise GenerationError(
                    f"blob of half-extent {half} cannot fit in side {cfg.side}"
                )
            cx = float(rng.uniform(lo, hi))
            cy = float(rng.uniform(lo, hi))
            ok = all(
                math.hypot(cx - px, cy - py) >= 0.8 * (half + ph)
                for px, py, _, ph in placed
            )
            if ok:
                placed.append((cx, cy, sigma, half))
                break
        else:
            raise GenerationError(
                f"could not place {count} blobs on a {cfg.side}px image after 200 tries"
            )
    return placed


def _render_blob(canvas: np.ndarray, cx, cy, sigma, amp, theta):
    """Add a bipolar pair of Gaussian lobes centered on (cx, cy)."""
    side = canvas.shape[0]
    d = 1.2 * sigma
    ox, oy = d * math.cos(theta), d * math.sin(theta)
    yy, xx = np.mgrid[0:side, 0:side]
    for sign, px, py in ((+1.0, cx + ox, cy + oy), (-1.0, cx - ox, cy - oy)):
        r2 = (xx - px) ** 2 + (yy - py) ** 2
        canvas += sign * amp * np.exp(-r2 / (2.0 * sigma * sigma))


def _longitude_from_x(cx: float, side: int) -> float:
    return (cx / (side - 1) * 2.0 - 1.0) * 90.0


def _window_flux(rng: np.random.Generator, label: str, amp: float, cfg: SynthConfig):
    """Map driver amplitude to a window-max peak flux consistent with the
    label: FL spans M1.0 upward into X; NF spans FQ/A/B/C below M1.0."""
    if label == "FL":
        lo, hi = cfg.driver_amp_fl
        frac = (amp - lo) / (hi - lo)
        return 1e-5 * 10.0 ** (1.5 * frac)
    lo, hi = cfg.driver_amp_nf
    if amp < lo + 0.25 * (hi - lo):
        return 0.0  # flare-quiet
    frac = (amp - (lo + 0.25 * (hi - lo))) / (0.75 * (hi - lo))
    return 1e-8 * 10.0 ** (2.95 * frac)


def gen_synthetic(cfg: SynthConfig, out_dir) -> Tuple[DatasetManifest, Dict[str, dict]]:
    """Materialize the corpus: PGM images, a manifest CSV, and ground-truth
    blob boxes (boxes.json). Returns the manifest and the boxes mapping."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    n_fl = round(cfg.samples * cfg.fl_ratio)
    labels = ["FL"] * n_fl + ["NF"] * (cfg.samples - n_fl)
    np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA55))).shuffle(labels)

    samples = []
    boxes: Dict[str, dict] = {}
    for i in range(cfg.samples):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, i)))
        label = labels[i]
        ts = _sample_timestamp(cfg, i)
        count = int(rng.integers(cfg.blobs_min, cfg.blobs_max + 1))
        placed = _place_blobs(rng, cfg, count)

        canvas = cfg.background + rng.normal(0.0, cfg.noise_sigma, (cfg.side, cfg.side))
        blob_boxes = []
        driver_amp = None
        for j, (cx, cy, sigma, half) in enumerate(placed):
            if j == 0:
                amp = float(rng.uniform(*(cfg.driver_amp_fl if label == "FL" else cfg.driver_amp_nf)))
                driver_amp = amp
            else:
                amp = float(rng.uniform(*cfg.other_amp))
            theta = float(rng.uniform(0.0, math.pi))
            _render_blob(canvas, cx, cy, sigma, amp, theta)
            blob_boxes.append(
                BlobBox(
                    x0=max(0, int(math.floor(cx - half))),
                    y0=max(0, int(math.floor(cy - half))),
                    x1=min(cfg.side, int(math.ceil(cx + half)) + 1),
                    y1=min(cfg.side, int(math.ceil(cy + half)) + 1),
                )
            )

        img = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        name = ts.strftime("%Y%m%d_%H%M%S") + ".pgm"
        write_pgm(image_dir / name, img)

        driver_cx = placed[0][0]
        lon = _longitude_from_x(driver_cx, cfg.side)
        flux = _window_flux(rng, label, driver_amp, cfg)
        samples.append(
            MagnetogramSample(
                timestamp=ts,
                image_path=f"images/{name}",
                label=label,
                window_max_class=flux_to_class(flux),
                window_max_flux=flux,
                hg_lon_deg=lon,
                partition=assign_partition(ts),
            )
        )
        boxes[f"images/{name}"] = {
            "label": label,
            "driver": blob_boxes[0].as_list(),
            "boxes": [bb.as_list() for bb in blob_boxes],
            "longitude": lon,
            "timestamp": render_timestamp(ts),
        }

    samples.sort(key=lambda s: s.timestamp)
    manifest = DatasetManifest(
        samples,
        provenance={
            "generator": "synthetic-bipolar-blobs",
            "seed": str(cfg.seed),
            "samples": str(cfg.samples),
            "side": str(cfg.side),
            "window_hours": "24",
        },
    )
    write_manifest(manifest, out_dir / "manifest.csv")
    (out_dir / "boxes.json").write_text(json.dumps(boxes, indent=1, sort_keys=True))
    return manifest, boxes
