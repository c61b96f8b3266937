"""Flare catalogs, magnetogram labeling, partitions, and imbalance handling.

Labels are binary: a sample is FL when the strongest GOES peak flux inside
its 24-hour prediction window reaches M1.0 (1e-5 W/m^2), NF otherwise.
Window membership is anchored on event peak time over the half-open
interval (t, t + window]. Partitions are tri-monthly calendar seasons.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DataError,
    FoldError,
    FormatError,
    ImbalanceError,
    LabelError,
)
from .pgm import read_pgm
from .tensor import Tensor, bilinear_resize

FL_THRESHOLD_WM2 = 1e-5  # >= M1.0
#: lower flux bound (W/m^2) of each lettered class; FQ is everything below A
CLASS_LOWER_BOUND = {"X": 1e-4, "M": 1e-5, "C": 1e-6, "B": 1e-7, "A": 1e-8, "FQ": 0.0}
_LETTER_ORDER = ("X", "M", "C", "B", "A")

WINDOW_HOURS_DEFAULT = 24
ROTATION_MAX_DEG = 5.0

MANIFEST_COLUMNS = (
    "timestamp",
    "image_path",
    "label",
    "window_max_class",
    "window_max_flux",
    "hg_lon_deg",
    "partition",
)


# ---------------------------------------------------------------------------
# flare classes and events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlareClass:
    """NOAA class letter plus one-decimal magnitude (absent for FQ)."""

    letter: str
    magnitude: Optional[float] = None

    def __post_init__(self):
        if self.letter not in CLASS_LOWER_BOUND:
            raise LabelError(f"unknown flare class letter {self.letter!r}")
        if self.letter == "FQ":
            if self.magnitude is not None:
                raise LabelError("FQ carries no magnitude")
        else:
            if self.magnitude is None or not (1.0 <= self.magnitude < 10.0):
                raise LabelError(
                    f"magnitude must be in [1.0, 10.0), got {self.magnitude}"
                )

    def __str__(self) -> str:
        if self.letter == "FQ":
            return "FQ"
        return f"{self.letter}{self.magnitude:.1f}"

    @classmethod
    def parse(cls, text: str) -> "FlareClass":
        text = text.strip()
        if text == "FQ":
            return cls("FQ")
        if len(text) < 2 or text[0] not in _LETTER_ORDER:
            raise LabelError(f"cannot parse flare class {text!r}")
        return cls(text[0], float(text[1:]))

    @property
    def flux_lower_bound(self) -> float:
        return CLASS_LOWER_BOUND[self.letter]

    @property
    def is_fl(self) -> bool:
        """True when the class is at or above the M1.0 binary threshold."""
        return self.letter in ("M", "X")


def flux_to_class(flux: float) -> FlareClass:
    """Convert a peak X-ray flux in W/m^2 to its NOAA class.

    Magnitude is flux over the class decade, rounded half-up to one decimal
    and capped at 9.9 so rounding never promotes across a class boundary.
    """
    if flux < 0:
        raise DataError(f"peak flux cannot be negative, got {flux}")
    if not math.isfinite(flux):
        raise DataError(f"peak flux must be finite, got {flux}")
    for letter in _LETTER_ORDER:
        base = CLASS_LOWER_BOUND[letter]
        if flux >= base:
            magnitude = min(math.floor(flux / base * 10.0 + 0.5) / 10.0, 9.9)
            return FlareClass(letter, magnitude)
    return FlareClass("FQ")


def class_lower_bound(letter: str) -> float:
    if letter not in CLASS_LOWER_BOUND:
        raise LabelError(f"unknown flare class letter {letter!r}")
    return CLASS_LOWER_BOUND[letter]


@dataclass(frozen=True)
class FlareEvent:
    """One GOES catalog entry."""

    peak_time: datetime
    peak_flux: float
    hg_longitude: float
    hg_latitude: float
    noaa_ar: Optional[int] = None

    def __post_init__(self):
        if self.peak_flux <= 0:
            raise DataError(f"peak flux must be positive, got {self.peak_flux}")
        if abs(self.hg_longitude) > 90:
            raise DataError(f"|longitude| must be <= 90, got {self.hg_longitude}")


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 UTC timestamp; naive values are taken as UTC."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise FormatError(f"bad timestamp {text!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def render_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_catalog(path) -> List[FlareEvent]:
    """Read a flare catalog CSV with header
    peak_time,peak_flux_wm2,hg_lon_deg,hg_lat_deg,noaa_ar."""
    path = Path(path)
    events = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"peak_time", "peak_flux_wm2", "hg_lon_deg", "hg_lat_deg"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise FormatError(f"{path}: catalog header must include {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                ar = row.get("noaa_ar", "")
                events.append(
                    FlareEvent(
                        peak_time=parse_timestamp(row["peak_time"]),
                        peak_flux=float(row["peak_flux_wm2"]),
                        hg_longitude=float(row["hg_lon_deg"]),
                        hg_latitude=float(row["hg_lat_deg"]),
                        noaa_ar=int(ar) if ar not in ("", None) else None,
                    )
                )
            except (ValueError, DataError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    events.sort(key=lambda e: e.peak_time)
    return events


def label_sample(
    timestamp: datetime,
    catalog: Sequence[FlareEvent],
    window_hours: float = WINDOW_HOURS_DEFAULT,
) -> Tuple[str, FlareClass, Optional[FlareEvent]]:
    """Label one observation time against the catalog.

    Events peaking inside (timestamp, timestamp + window] are considered;
    FL iff the strongest reaches 1e-5 W/m^2. An empty window is NF/FQ.
    """
    times = [e.peak_time for e in catalog]
    if any(times[i] > times[i + 1] for i in range(len(times) - 1)):
        catalog = sorted(catalog, key=lambda e: e.peak_time)
        times = [e.peak_time for e in catalog]
    lo = bisect.bisect_right(times, timestamp)
    hi = bisect.bisect_right(times, timestamp + timedelta(hours=window_hours))
    window = catalog[lo:hi]
    if not window:
        return "NF", FlareClass("FQ"), None
    best = max(window, key=lambda e: e.peak_flux)
    label = "FL" if best.peak_flux >= FL_THRESHOLD_WM2 else "NF"
    return label, flux_to_class(best.peak_flux), best


def assign_partition(timestamp: datetime) -> int:
    """Tri-monthly partition: Jan-Mar 1, Apr-Jun 2, Jul-Sep 3, Oct-Dec 4."""
    return (timestamp.month - 1) // 3 + 1


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MagnetogramSample:
    """One labeled, partitioned magnetogram observation."""

    timestamp: datetime
    image_path: str
    label: str
    window_max_class: FlareClass
    window_max_flux: float
    hg_lon_deg: Optional[float]
    partition: int
    window_max_event: Optional[FlareEvent] = field(default=None, compare=False)

    def __post_init__(self):
        if self.label not in ("FL", "NF"):
            raise LabelError(f"label must be FL or NF, got {self.label!r}")
        if (self.label == "FL") != (self.window_max_flux >= FL_THRESHOLD_WM2):
            raise DataError(
                f"label {self.label} inconsistent with window flux {self.window_max_flux}"
            )
        if self.partition not in (1, 2, 3, 4):
            raise DataError(f"partition must be 1..4, got {self.partition}")
        if self.timestamp.minute or self.timestamp.second or self.timestamp.microsecond:
            raise DataError(f"timestamps are hourly, got {self.timestamp}")


@dataclass
class DatasetManifest:
    """Ordered samples plus provenance notes (catalog, window, seed)."""

    samples: List[MagnetogramSample]
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.timestamp in seen:
                raise DataError(f"duplicate manifest timestamp {s.timestamp}")
            seen.add(s.timestamp)

    def __eq__(self, other):
        return (
            isinstance(other, DatasetManifest)
            and self.samples == other.samples
            and self.provenance == other.provenance
        )

    def partition_counts(self) -> Dict[str, List[int]]:
        counts = {"FL": [0, 0, 0, 0], "NF": [0, 0, 0, 0]}
        for s in self.samples:
            counts[s.label][s.partition - 1] += 1
        return counts


def render_manifest(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    for key in sorted(manifest.provenance):
        buf.write(f"# {key}={manifest.provenance[key]}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for s in manifest.samples:
        writer.writerow(
            [
                render_timestamp(s.timestamp),
                s.image_path,
                s.label,
                str(s.window_max_class),
                repr(float(s.window_max_flux)),
                "" if s.hg_lon_deg is None else repr(float(s.hg_lon_deg)),
                s.partition,
            ]
        )
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path):
    Path(path).write_text(render_manifest(manifest))


def parse_manifest(text: str) -> DatasetManifest:
    provenance: Dict[str, str] = {}
    lines = text.splitlines()
    body_start = 0
    for line in lines:
        if not line.startswith("#"):
            break
        body_start += 1
        entry = line[1:].strip()
        if "=" in entry:
            key, value = entry.split("=", 1)
            provenance[key.strip()] = value.strip()
    reader = csv.reader(lines[body_start:])
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("manifest has no header row") from None
    if tuple(header) != MANIFEST_COLUMNS:
        raise FormatError(f"manifest header {header} != {list(MANIFEST_COLUMNS)}")
    samples = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(MANIFEST_COLUMNS):
            raise FormatError(f"manifest row has {len(row)} fields: {row}")
        ts, image_path, label, klass, flux, lon, part = row
        samples.append(
            MagnetogramSample(
                timestamp=parse_timestamp(ts),
                image_path=image_path,
                label=label,
                window_max_class=FlareClass.parse(klass),
                window_max_flux=float(flux),
                hg_lon_deg=None if lon == "" else float(lon),
                partition=int(part),
            )
        )
    return DatasetManifest(samples, provenance)


def read_manifest(path, check_images: bool = True) -> DatasetManifest:
    path = Path(path)
    manifest = parse_manifest(path.read_text())
    if check_images:
        root = path.parent
        for s in manifest.samples:
            p = Path(s.image_path)
            if not (p if p.is_absolute() else root / p).exists():
                raise DataError(f"manifest references missing image {s.image_path}")
    return manifest


def resolve_image_path(manifest_path, sample: MagnetogramSample) -> Path:
    p = Path(sample.image_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    index: int
    train_partitions: Tuple[int, ...]
    test_partition: int


def make_folds(manifest: DatasetManifest) -> List[Fold]:
    """Four folds: fold k tests on partition k, trains on the rest."""
    counts = manifest.partition_counts()
    present = [counts["FL"][p] + counts["NF"][p] for p in range(4)]
    empty = [p + 1 for p, n in enumerate(present) if n == 0]
    if empty:
        raise FoldError(f"empty partition(s) {empty}: cannot build 4 folds")
    return [
        Fold(k, tuple(p for p in (1, 2, 3, 4) if p != k), k) for k in (1, 2, 3, 4)
    ]


def split_fold(
    manifest: DatasetManifest, fold: Fold
) -> Tuple[List[MagnetogramSample], List[MagnetogramSample]]:
    train = [s for s in manifest.samples if s.partition != fold.test_partition]
    test = [s for s in manifest.samples if s.partition == fold.test_partition]
    return train, test


# ---------------------------------------------------------------------------
# augmentation and oversampling
# ---------------------------------------------------------------------------

TRANSFORMS = ("none", "vflip", "hflip", "rot")


@dataclass(frozen=True)
class TrainExample:
    """A training-set entry: a manifest sample plus its (optional) derived
    transform and an oversampling marker."""

    sample: MagnetogramSample
    transform: str = "none"
    angle_deg: float = 0.0
    oversampled: bool = False

    @property
    def is_derived(self) -> bool:
        return self.transform != "none" or self.oversampled


def _sample_rng(seed: int, sample: MagnetogramSample, tag: int) -> np.random.Generator:
    """Independent per-sample substream, keyed on the sample's timestamp so
    results do not depend on processing order."""
    key = int(sample.timestamp.timestamp())
    return np.random.default_rng(np.random.SeedSequence((seed, tag, key)))


def augment_minority(
    samples: Sequence[MagnetogramSample], seed: int
) -> List[TrainExample]:
    """Expand every FL sample with a vertical flip, a horizontal flip, and a
    small random rotation; NF samples pass through untouched."""
    out: List[TrainExample] = []
    for s in samples:
        out.append(TrainExample(s))
        if s.label != "FL":
            continue
        angle = float(
            _sample_rng(seed, s, 1).uniform(-ROTATION_MAX_DEG, ROTATION_MAX_DEG)
        )
        out.append(TrainExample(s, transform="vflip"))
        out.append(TrainExample(s, transform="hflip"))
        out.append(TrainExample(s, transform="rot", angle_deg=angle))
    return out


def oversample_to_parity(
    examples: Sequence[TrainExample], seed: int
) -> List[TrainExample]:
    """Duplicate FL entries at random until FL and NF counts match, then
    shuffle with the same seed stream."""
    fl = [e for e in examples if e.sample.label == "FL"]
    nf = [e for e in examples if e.sample.label == "NF"]
    if not fl:
        raise ImbalanceError("cannot oversample: no FL samples in the training split")
    if len(fl) > len(nf):
        raise ImbalanceError(
            f"FL ({len(fl)}) already exceeds NF ({len(nf)}); oversampling assumes FL minority"
        )
    out = list(examples)
    if len(fl) == len(nf):
        return out
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    picks = rng.integers(0, len(fl), size=len(nf) - len(fl))
    out.extend(replace(fl[int(i)], oversampled=True) for i in picks)
    perm = rng.permutation(len(out))
    return [out[int(i)] for i in perm]


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def normalize_pixels(img: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels to [-1, 1] via p / 127.5 - 1."""
    return (img.astype(np.float32) / 127.5) - 1.0


def load_image(path, target_side: int) -> Tensor:
    """Load an 8-bit grayscale PGM as a [1, S, S] tensor in [-1, 1],
    bilinearly resized when the stored side differs."""
    img = normalize_pixels(read_pgm(path))
    h, w = img.shape
    if (h, w) != (target_side, target_side):
        img = bilinear_resize(img, target_side, target_side)
    return Tensor(img[None, :, :])


def flip_vertical(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[::-1, :])


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def rotate_image(img: np.ndarray, angle_deg: float, fill: float = 0.0) -> np.ndarray:
    """Rotate about the image center with bilinear resampling; out-of-bounds
    source positions take ``fill`` (0.0 = quiet field in normalized space)."""
    h, w = img.shape
    theta = math.radians(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse rotation of output coordinates back into the source frame
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    src_y = cos_t * yy + sin_t * xx + cy
    src_x = -sin_t * yy + cos_t * xx + cx
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    fy = (src_y - y0).astype(np.float32)
    fx = (src_x - x0).astype(np.float32)
    out = np.zeros((h, w), dtype=np.float32)
    for dy in (0, 1):
        for dx in (0, 1):
            ys, xs = y0 + dy, x0 + dx
            inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
            weight = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            vals = np.where(inside, img[np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1)], fill)
            out += weight * vals
    return out


def apply_transform(img: np.ndarray, example: TrainExample) -> np.ndarray:
    if example.transform == "none":
        return img
    if example.transform == "vflip":
        return flip_vertical(img)
    if example.transform == "hflip":
        return flip_horizontal(img)
    if example.transform == "rot":
        return rotate_image(img, example.angle_deg)
    raise DataError(f"unknown transform {example.transform!r}")


# ---------------------------------------------------------------------------
# partition summaries (Table-I layout)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionSummary:
    nf: Tuple[int, int, int, int]
    fl: Tuple[int, int, int, int]

    @property
    def nf_total(self) -> int:
        return sum(self.nf)

    @property
    def fl_total(self) -> int:
        return sum(self.fl)

    @property
    def grand_total(self) -> int:
        return self.nf_total + self.fl_total

    def ratio_text(self, partition: Optional[int] = None) -> str:
        """Approximate FL:NF ratio, e.g. '~1:6'; partition None = overall."""
        if partition is None:
            fl, nf = self.fl_total, self.nf_total
        else:
            fl, nf = self.fl[partition - 1], self.nf[partition - 1]
        if fl == 0:
            return "n/a"
        return f"~1:{round(nf / fl)}"

    def table_text(self) -> str:
        headers = ["Binary Class", "P1", "P2", "P3", "P4", "Total"]
        rows = [
            ["NF (<M1.0)"] + [str(c) for c in self.nf] + [str(self.nf_total)],
            ["FL (>=M1.0)"] + [str(c) for c in self.fl] + [str(self.fl_total)],
            ["FL:NF"] + [self.ratio_text(p) for p in (1, 2, 3, 4)] + [self.ratio_text()],
        ]
        widths = [max(len(r[i]) for r in [headers] + rows) for i in range(6)]
        fmt = "  ".join("{:>%d}" % w for w in widths)
        lines = [fmt.format(*headers)] + [fmt.format(*r) for r in rows]
        return "\n".join(lines)


def summarize_counts(nf: Sequence[int], fl: Sequence[int]) -> PartitionSummary:
    if len(nf) != 4 or len(fl) != 4:
        raise DataError("partition summaries need exactly four NF and FL counts")
    return PartitionSummary(tuple(int(c) for c in nf), tuple(int(c) for c in fl))


def summarize_manifest(manifest: DatasetManifest) -> PartitionSummary:
    counts = manifest.partition_counts()
    return summarize_counts(counts["NF"], counts["FL"])
