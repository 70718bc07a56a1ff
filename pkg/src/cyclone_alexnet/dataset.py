"""Labeled cyclone imagery: ingestion, storm-disjoint splits and debiased batches.

Batches follow a fixed recipe aimed at the imbalance of real best-track data
(a few storms contribute hundreds of images, most images sit at 30-62 kt):

* one image per distinct (integer) wind speed in the training set;
* for each speed, a storm is drawn uniformly among the storms that reach that
  speed, then an image uniformly among that storm's images at that speed;
* each selected image is independently rotated with probability
  ``rotation_fraction``.
"""

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError
from .rng import make_rng

LABEL_FIELDS = ["image_id", "storm_id", "wind_speed", "ocean", "relative_time"]
ROTATION_POLICIES = ("quarter-turns", "arbitrary-angle")


@dataclass
class CycloneSample:
    image_id: str
    storm_id: str
    image: np.ndarray
    wind_speed: float
    ocean: str | None = None
    relative_time: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def speed_key(self):
        return int(round(self.wind_speed))


class DatasetIndex:
    """Immutable collection of samples indexed by storm and by integer speed."""

    def __init__(self, samples):
        self.samples = list(samples)
        seen = set()
        for s in self.samples:
            if s.image_id in seen:
                raise DataError(f"duplicate image_id {s.image_id!r}")
            seen.add(s.image_id)
            if not s.wind_speed > 0:
                raise DataError(f"image {s.image_id!r} has nonpositive wind speed {s.wind_speed}")
        self.by_storm = defaultdict(list)
        # speed -> storm -> sample positions; storms kept in first-seen order
        self.by_speed = defaultdict(dict)
        for pos, s in enumerate(self.samples):
            self.by_storm[s.storm_id].append(pos)
            self.by_speed[s.speed_key].setdefault(s.storm_id, []).append(pos)
        self.by_storm = dict(self.by_storm)
        self.by_speed = dict(sorted(self.by_speed.items()))

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def storm_ids(self):
        return list(self.by_storm)

    @property
    def speeds(self):
        """Distinct integer speeds, ascending."""
        return list(self.by_speed)

    @property
    def image_size(self):
        return self.samples[0].image.shape[0] if self.samples else None

    def speed_index(self):
        """speed -> list of (storm_id, image_id)."""
        return {
            sp: [(sid, self.samples[p].image_id) for sid, ps in storms.items() for p in ps]
            for sp, storms in self.by_speed.items()
        }

    def images(self):
        if not self.samples:
            return np.zeros((0, 0, 0), dtype=np.float32)
        return np.stack([s.image for s in self.samples]).astype(np.float32)

    def labels(self):
        return np.array([s.wind_speed for s in self.samples], dtype=np.float64)

    def arrays(self):
        return self.images(), self.labels()

    def subset(self, predicate):
        return DatasetIndex([s for s in self.samples if predicate(s)])

    def storms(self, storm_ids):
        wanted = set(storm_ids)
        return DatasetIndex([s for s in self.samples if s.storm_id in wanted])

    def resized(self, size):
        if self.image_size == size:
            return self
        return DatasetIndex([_replace_image(s, resize_image(s.image, size)) for s in self.samples])


def _replace_image(sample, image):
    return CycloneSample(
        sample.image_id, sample.storm_id, image, sample.wind_speed, sample.ocean, sample.relative_time, dict(sample.meta)
    )


def resize_image(image, size):
    """Bilinear resize of a square image to ``size`` x ``size`` (half-pixel centers)."""
    img = Image.fromarray(np.asarray(image, dtype=np.float32), mode="F")
    return np.clip(np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32), 0.0, 1.0)


# ingestion -------------------------------------------------------------------


def read_image(path):
    """Grayscale image as float32 in [0, 1]; 8-bit and 16-bit files accepted."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        elif img.mode == "L":
            arr = np.asarray(img, dtype=np.float64) / 255.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def write_image(path, image):
    """Write a [0, 1] image as 8-bit PNG."""
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def _find_image(image_dir, image_id):
    for ext in (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".pgm", ""):
        p = image_dir / f"{image_id}{ext}"
        if p.is_file():
            return p
    return None


def load_dataset(image_dir, labels_csv, size=None, strict=False):
    """Load every valid row of ``labels_csv`` with its image from ``image_dir``.

    Rows with a missing file, non-square image or nonpositive speed are
    skipped and listed in ``index.row_errors``. With ``strict=True`` any bad
    row raises :class:`DataError` carrying the full list. ``size`` resizes
    images on load.
    """
    image_dir = Path(image_dir)
    try:
        fh = open(labels_csv, newline="")
    except OSError as e:
        raise DataError(f"cannot read labels file {labels_csv}: {e}") from e
    samples, errors = [], []
    with fh:
        reader = csv.DictReader(fh)
        missing = {"image_id", "storm_id", "wind_speed"} - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"labels file lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            image_id = row["image_id"]
            try:
                speed = float(row["wind_speed"])
            except ValueError:
                errors.append((lineno, image_id, f"unparseable wind_speed {row['wind_speed']!r}"))
                continue
            if not speed > 0:
                errors.append((lineno, image_id, f"nonpositive wind_speed {speed}"))
                continue
            path = _find_image(image_dir, image_id)
            if path is None:
                errors.append((lineno, image_id, "image file not found"))
                continue
            try:
                image = read_image(path)
            except OSError as e:
                errors.append((lineno, image_id, f"unreadable image: {e}"))
                continue
            if image.ndim != 2 or image.shape[0] != image.shape[1]:
                errors.append((lineno, image_id, f"image is not square: {image.shape}"))
                continue
            if size is not None and image.shape[0] != size:
                image = resize_image(image, size)
            samples.append(
                CycloneSample(
                    image_id=image_id,
                    storm_id=row["storm_id"],
                    image=image,
                    wind_speed=speed,
                    ocean=row.get("ocean") or None,
                    relative_time=row.get("relative_time") or None,
                )
            )
    if errors and strict:
        raise DataError(f"{len(errors)} bad rows in {labels_csv}", row_errors=errors)
    index = DatasetIndex(samples)
    index.row_errors = errors
    return index


def write_labels(index, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LABEL_FIELDS)
        writer.writeheader()
        for s in index:
            speed = s.wind_speed
            writer.writerow(
                {
                    "image_id": s.image_id,
                    "storm_id": s.storm_id,
                    "wind_speed": int(speed) if float(speed).is_integer() else repr(float(speed)),
                    "ocean": s.ocean or "",
                    "relative_time": s.relative_time or "",
                }
            )


def export_dataset(index, out_dir, labels_name="labels.csv"):
    """Write images as ``<image_id>.png`` plus a labels CSV in the ingestion layout."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    for s in index:
        write_image(image_dir / f"{s.image_id}.png", s.image)
    write_labels(index, out_dir / labels_name)
    meta_keys = sorted({k for s in index for k in s.meta})
    if meta_keys:
        with open(out_dir / "meta.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id"] + meta_keys)
            for s in index:
                writer.writerow([s.image_id] + [s.meta.get(k, "") for k in meta_keys])
    return out_dir


def attach_meta(index, meta_csv):
    """Merge per-image metadata columns (e.g. synthetic eye position) into samples."""
    with open(meta_csv, newline="") as fh:
        rows = {r["image_id"]: r for r in csv.DictReader(fh)}
    for s in index:
        row = rows.get(s.image_id)
        if row:
            s.meta.update({k: float(v) for k, v in row.items() if k != "image_id" and v != ""})
    return index


# splitting -------------------------------------------------------------------


def event_disjoint_split(index, val_fraction=0.2, seed=0):
    """Partition storms at random into (train, val); no storm is in both.

    The validation side receives ``round(val_fraction * n_storms)`` storms,
    clamped to leave at least one storm on each side.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    storms = index.storm_ids
    if len(storms) < 2:
        raise DataError("cannot split a dataset with fewer than two storms")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed, 7)
    n_val = min(max(int(round(val_fraction * len(storms))), 1), len(storms) - 1)
    order = rng.permutation(len(storms))
    val_ids = {storms[i] for i in order[:n_val]}
    train = DatasetIndex([s for s in index if s.storm_id not in val_ids])
    val = DatasetIndex([s for s in index if s.storm_id in val_ids])
    return train, val


# augmentation ----------------------------------------------------------------


def rotate_quarter(image, k):
    """Rotate by ``k`` quarter turns counter-clockwise, with rows counted upward.

    Row 0 is treated as the bottom of the picture (satellite/geographic
    convention), so ``rotate_quarter([[1, 2], [3, 4]], 1)`` is ``[[3, 1], [4, 2]]``.
    """
    return np.rot90(image, -int(k))


def augment_rotate(image, policy="quarter-turns", rng=None):
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise DataError(f"rotation needs a square image, got shape {image.shape}")
    if policy == "quarter-turns":
        return np.ascontiguousarray(rotate_quarter(image, rng.integers(1, 4)))
    if policy == "arbitrary-angle":
        angle = rng.uniform(0.0, 360.0)
        return ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0).astype(image.dtype)
    raise ConfigError(f"unknown rotation policy {policy!r}")


# sampling --------------------------------------------------------------------


@dataclass
class SamplerConfig:
    rotation_fraction: float = 0.5
    rotation_policy: str = "quarter-turns"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rotation_fraction <= 1.0:
            raise ConfigError("rotation_fraction must lie in [0, 1]")
        if self.rotation_policy not in ROTATION_POLICIES:
            raise ConfigError(f"rotation_policy must be one of {ROTATION_POLICIES}")


def choose_batch(index, rng):
    """Positions of one debiased batch: one image per distinct speed.

    For each speed (ascending) a storm is drawn uniformly among the storms that
    have images at that speed, then one of that storm's images at that speed.
    """
    positions = []
    for storms in index.by_speed.values():
        lists = list(storms.values())
        chosen = lists[rng.integers(len(lists))]
        positions.append(chosen[rng.integers(len(chosen))])
    return positions


def sample_batch(index, cfg, rng, return_details=False):
    """Draw one batch: ``(images [B,H,W], speeds [B])`` with B = number of distinct speeds."""
    if len(index) == 0:
        raise DataError("cannot sample from an empty dataset")
    positions = choose_batch(index, rng)
    images, speeds, rotated = [], [], []
    for pos in positions:
        s = index.samples[pos]
        img = s.image
        flip = cfg.rotation_fraction > 0 and rng.random() < cfg.rotation_fraction
        if flip:
            img = augment_rotate(img, cfg.rotation_policy, rng)
        images.append(img)
        speeds.append(s.wind_speed)
        rotated.append(flip)
    batch = np.stack(images).astype(np.float32), np.asarray(speeds, dtype=np.float64)
    if return_details:
        return batch + (positions, np.asarray(rotated))
    return batch


class BatchSampler:
    """Callable batch source bound to one training index."""

    def __init__(self, index, cfg=None):
        if len(index) == 0:
            raise DataError("cannot sample from an empty dataset")
        self.index = index
        self.cfg = cfg or SamplerConfig()

    @property
    def batch_size(self):
        return len(self.index.by_speed)

    def default_steps(self):
        return max(1, math.ceil(len(self.index) / self.batch_size))

    def sample(self, rng):
        return sample_batch(self.index, self.cfg, rng)
