"""Saffir-Simpson taxonomy, bagged global ensemble and gated local experts.

The distributed estimator routes each image through the global ensemble,
maps the predicted speed to a Saffir-Simpson category, and averages the
ensemble's speed with the prediction of that category's expert network.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import BatchSampler, CycloneSample, DatasetIndex, SamplerConfig
from .errors import CheckpointError, ConfigError, CycloneError
from .network import CHECKPOINT_FORMAT, build_alexnet, load_checkpoint, read_manifest, save_checkpoint
from .rng import derive_seed, make_rng
from .training import train

log = logging.getLogger(__name__)

OVERLAP_POLICIES = ("none", "one-third-adjacent")
ENSEMBLE_FORMAT = "cyclone-alexnet-ensemble"
DISTRIBUTED_FORMAT = "cyclone-alexnet-distributed"
DEFAULT_MAX_SPEED = 185.0


@dataclass(frozen=True)
class SaffirSimpsonCategory:
    level: int
    code: str
    name: str
    lo: float
    hi: float

    def contains(self, speed):
        return self.lo <= speed < self.hi

    def __str__(self):
        return self.code


CATEGORIES = (
    SaffirSimpsonCategory(1, "TD", "Tropical Depression", 0.0, 34.0),
    SaffirSimpsonCategory(2, "TS", "Tropical Storm", 34.0, 64.0),
    SaffirSimpsonCategory(3, "H1", "Category 1", 64.0, 83.0),
    SaffirSimpsonCategory(4, "H2", "Category 2", 83.0, 96.0),
    SaffirSimpsonCategory(5, "H3", "Category 3", 96.0, 113.0),
    SaffirSimpsonCategory(6, "H4", "Category 4", 113.0, 137.0),
    SaffirSimpsonCategory(7, "H5", "Category 5", 137.0, math.inf),
)
BY_CODE = {c.code: c for c in CATEGORIES}
_LOWER_BOUNDS = np.array([c.lo for c in CATEGORIES])


def category(code_or_level):
    if isinstance(code_or_level, SaffirSimpsonCategory):
        return code_or_level
    if isinstance(code_or_level, (int, np.integer)):
        if not 1 <= code_or_level <= len(CATEGORIES):
            raise ConfigError(f"unknown category level {code_or_level}")
        return CATEGORIES[code_or_level - 1]
    try:
        return BY_CODE[str(code_or_level)]
    except KeyError:
        raise ConfigError(f"unknown category {code_or_level!r}") from None


def categorize(speed):
    """The category whose half-open knot interval holds ``speed``."""
    speed = float(speed)
    if not speed > 0 or math.isnan(speed):
        raise ConfigError(f"speed must be positive, got {speed}")
    return CATEGORIES[int(np.searchsorted(_LOWER_BOUNDS, speed, side="right")) - 1]


def categorize_many(speeds):
    """Vectorized :func:`categorize` returning 0-based category indices."""
    speeds = np.asarray(speeds, dtype=np.float64)
    if not np.all(speeds > 0):
        raise ConfigError("speeds must be positive")
    return np.searchsorted(_LOWER_BOUNDS, speeds, side="right") - 1


def _nominal_width(cat, max_speed):
    hi = max_speed if math.isinf(cat.hi) else cat.hi
    return hi - cat.lo


def expert_range(cat, max_speed=DEFAULT_MAX_SPEED, policy="none"):
    """Training speed interval ``[lo, hi)`` for a category's expert.

    With ``"one-third-adjacent"`` the interval reaches into each neighbouring
    category by a third of that neighbour's nominal width. The open-ended top
    category takes ``max_speed`` as its upper edge when a width is needed; its
    own range stays unbounded above.
    """
    cat = category(cat)
    if policy not in OVERLAP_POLICIES:
        raise ConfigError(f"overlap policy must be one of {OVERLAP_POLICIES}, got {policy!r}")
    lo, hi = cat.lo, cat.hi
    if policy == "one-third-adjacent":
        i = cat.level - 1
        if i > 0:
            lo -= _nominal_width(CATEGORIES[i - 1], max_speed) / 3.0
        if i < len(CATEGORIES) - 1:
            hi += _nominal_width(CATEGORIES[i + 1], max_speed) / 3.0
    return lo, hi


def expert_ranges(max_speed=DEFAULT_MAX_SPEED, policy="none"):
    return {c.code: expert_range(c, max_speed, policy) for c in CATEGORIES}


# global ensemble -------------------------------------------------------------


class GlobalEnsemble:
    """Bagged set of networks; the prediction is the plain mean in knots."""

    def __init__(self, members, seeds=None, subsets=None):
        if not members:
            raise ConfigError("an ensemble needs at least one member")
        sizes = {getattr(m, "config", None) and m.config.input_size for m in members}
        if len(sizes) > 1:
            raise ConfigError(f"ensemble members disagree on input size: {sizes}")
        self.members = list(members)
        self.seeds = list(seeds) if seeds is not None else [None] * len(members)
        self.subsets = list(subsets) if subsets is not None else [None] * len(members)

    def __len__(self):
        return len(self.members)

    @property
    def config(self):
        return self.members[0].config

    def member_predictions(self, images):
        return np.stack([np.asarray(m.predict(images), dtype=np.float64) for m in self.members])

    def predict(self, images):
        preds = self.member_predictions(images)
        total = np.zeros(preds.shape[1])
        for p in preds:  # fixed member order keeps the sum bitwise stable
            total += p
        return total / len(preds)


def ensemble_predict(ensemble, images):
    if len(ensemble.members) == 0:
        raise ConfigError("empty ensemble")
    return ensemble.predict(images)


def bootstrap_subset(train_index, rng):
    """Storm-level bootstrap that still covers every training speed.

    Storms are drawn with replacement up to the original storm count; then,
    for each speed still missing (ascending), one storm holding it is drawn
    uniformly and added. Repeated draws become distinct storms (``id#k``) so
    the sampler weighs them as separate events. Returns the new index and the
    list of drawn source storm ids.
    """
    storms = train_index.storm_ids
    if not storms:
        raise ConfigError("cannot bootstrap an empty dataset")
    drawn = [storms[i] for i in rng.integers(len(storms), size=len(storms))]
    covered = set()
    for sid in drawn:
        covered.update(train_index.samples[p].speed_key for p in train_index.by_storm[sid])
    for speed, holders in train_index.by_speed.items():
        if speed in covered:
            continue
        options = list(holders)
        sid = options[rng.integers(len(options))]
        drawn.append(sid)
        covered.update(train_index.samples[p].speed_key for p in train_index.by_storm[sid])
    samples, copies = [], {}
    for sid in drawn:
        k = copies.get(sid, 0)
        copies[sid] = k + 1
        for p in train_index.by_storm[sid]:
            s = train_index.samples[p]
            suffix = "" if k == 0 else f"#{k}"
            samples.append(
                CycloneSample(
                    s.image_id + suffix, s.storm_id + suffix, s.image, s.wind_speed, s.ocean, s.relative_time, s.meta
                )
            )
    return DatasetIndex(samples), drawn


def _train_one(job):
    index, net_config, hyper, seed, val_arrays = job
    model = build_alexnet(net_config, seed)
    sampler = BatchSampler(index, SamplerConfig(hyper.rotation_fraction, hyper.rotation_policy, seed))
    report = train(model, sampler, hyper, val_set=val_arrays, seed=seed)
    return model, report


def _run_jobs(jobs, n_jobs, labels):
    """Train each job, in-process or across processes; order of results follows ``jobs``."""
    results = []
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [pool.submit(_train_one, job) for job in jobs]
            for label, fut in zip(labels, futures):
                try:
                    results.append(fut.result())
                except CycloneError as e:
                    raise type(e)(f"{label}: {e}") from e
    else:
        for label, job in zip(labels, jobs):
            try:
                results.append(_train_one(job))
            except CycloneError as e:
                raise type(e)(f"{label}: {e}") from e
    return results


def bootstrap_train_ensemble(train_index, net_config, hyper, m=10, seed=0, val=None, jobs=1):
    """Train ``m`` members, each on its own storm-level bootstrap of ``train_index``.

    Returns ``(GlobalEnsemble, reports)``.
    """
    if m < 1:
        raise ConfigError("ensemble size must be >= 1")
    val_arrays = val.arrays() if val is not None and len(val) else None
    jobs_list, seeds, subsets = [], [], []
    for k in range(m):
        member_seed = derive_seed(seed, 100, k)
        subset, drawn = bootstrap_subset(train_index, make_rng(seed, 100, k))
        jobs_list.append((subset, net_config, hyper, member_seed, val_arrays))
        seeds.append(member_seed)
        subsets.append(drawn)
    results = _run_jobs(jobs_list, jobs, [f"member {k}" for k in range(m)])
    ensemble = GlobalEnsemble([r[0] for r in results], seeds, subsets)
    return ensemble, [r[1] for r in results]


# experts ---------------------------------------------------------------------


def expert_subsets(train_index, ranges):
    """Sub-index of ``train_index`` per category; empty categories are dropped."""
    out = {}
    for code, (lo, hi) in ranges.items():
        sub = train_index.subset(lambda s, lo=lo, hi=hi: lo <= s.wind_speed < hi)
        if len(sub):
            out[code] = sub
    return out


def train_experts(train_index, ranges, net_config, hyper, seed=0, val=None, jobs=1):
    """One network per category with data in its range.

    Returns ``(experts, reports)`` keyed by category code. The validation set,
    when given, is restricted to each expert's range as well.
    """
    subsets = expert_subsets(train_index, ranges)
    missing = [code for code in ranges if code not in subsets]
    if missing:
        log.warning("no training data for categories %s; they fall back to the gate", ", ".join(missing))
    jobs_list, labels = [], []
    for code, sub in subsets.items():
        lo, hi = ranges[code]
        val_arrays = None
        if val is not None:
            vs = val.subset(lambda s, lo=lo, hi=hi: lo <= s.wind_speed < hi)
            val_arrays = vs.arrays() if len(vs) else None
        expert_seed = derive_seed(seed, 200, category(code).level)
        jobs_list.append((sub, net_config, hyper, expert_seed, val_arrays))
        labels.append(f"expert {code}")
    results = _run_jobs(jobs_list, jobs, labels)
    experts = {code: r[0] for code, r in zip(subsets, results)}
    reports = {code: r[1] for code, r in zip(subsets, results)}
    return experts, reports


@dataclass
class DistributedModel:
    gate: object
    experts: dict
    overlap_policy: str = "none"
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        for code in self.experts:
            category(code)
        if self.overlap_policy not in OVERLAP_POLICIES:
            raise ConfigError(f"unknown overlap policy {self.overlap_policy!r}")

    @property
    def config(self):
        return self.gate.config

    @property
    def fallbacks(self):
        return [c.code for c in CATEGORIES if c.code not in self.experts]

    def predict(self, images):
        return moe_predict(self, images)[0]


def moe_predict(dm, images):
    """Gate-then-expert prediction.

    Returns ``(final, diagnostics)`` where diagnostics holds per-sample arrays
    ``gate``, ``category`` (code), ``expert`` (NaN when no expert exists) and
    ``fallback`` (bool). Routing is single pass: the expert's own output never
    re-routes.
    """
    images = np.asarray(images)
    gate = np.asarray(dm.gate.predict(images), dtype=np.float64)
    cats = categorize_many(gate)
    expert = np.full(gate.shape, np.nan)
    for ci in np.unique(cats):
        code = CATEGORIES[ci].code
        model = dm.experts.get(code)
        if model is None:
            continue
        rows = np.flatnonzero(cats == ci)
        expert[rows] = np.asarray(model.predict(images[rows]), dtype=np.float64)
    fallback = np.isnan(expert)
    final = np.where(fallback, gate, (gate + np.where(fallback, 0.0, expert)) / 2.0)
    diagnostics = {
        "gate": gate,
        "category": np.array([CATEGORIES[c].code for c in cats]),
        "expert": expert,
        "fallback": fallback,
    }
    return final, diagnostics


# composite checkpoints ---------------------------------------------------------


def save_ensemble(ensemble, path, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    members = []
    for k, (model, seed, subset) in enumerate(zip(ensemble.members, ensemble.seeds, ensemble.subsets)):
        rel = f"member_{k:02d}"
        save_checkpoint(model, path / rel)
        members.append({"dir": rel, "seed": seed, "storms": subset})
    manifest = {"format": ENSEMBLE_FORMAT, "version": 1, "members": members}
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_ensemble(path):
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format") != ENSEMBLE_FORMAT:
        raise CheckpointError(f"{path} is not an ensemble checkpoint")
    members = [load_checkpoint(path / m["dir"]) for m in manifest["members"]]
    return GlobalEnsemble(
        members, [m.get("seed") for m in manifest["members"]], [m.get("storms") for m in manifest["members"]]
    )


def save_distributed(dm, path, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if isinstance(dm.gate, GlobalEnsemble):
        save_ensemble(dm.gate, path / "gate")
    else:
        save_checkpoint(dm.gate, path / "gate")
    experts = {}
    for code, model in dm.experts.items():
        save_checkpoint(model, path / "experts" / code)
        experts[code] = f"experts/{code}"
    manifest = {
        "format": DISTRIBUTED_FORMAT,
        "version": 1,
        "gate": "gate",
        "experts": experts,
        "overlap_policy": dm.overlap_policy,
        "ranges": {k: [lo, None if math.isinf(hi) else hi] for k, (lo, hi) in dm.ranges.items()},
        "fallbacks": dm.fallbacks,
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_distributed(path):
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format") != DISTRIBUTED_FORMAT:
        raise CheckpointError(f"{path} is not a distributed-model checkpoint")
    gate = load_any(path / manifest["gate"])
    experts = {code: load_checkpoint(path / rel) for code, rel in manifest["experts"].items()}
    ranges = {k: (lo, math.inf if hi is None else hi) for k, (lo, hi) in manifest.get("ranges", {}).items()}
    return DistributedModel(gate, experts, manifest.get("overlap_policy", "none"), ranges)


def load_any(path):
    """Load a single-model, ensemble or distributed checkpoint by its manifest format."""
    fmt = read_manifest(path).get("format")
    if fmt == CHECKPOINT_FORMAT:
        return load_checkpoint(path)
    if fmt == ENSEMBLE_FORMAT:
        return load_ensemble(path)
    if fmt == DISTRIBUTED_FORMAT:
        return load_distributed(path)
    raise CheckpointError(f"unknown checkpoint format {fmt!r} in {path}")
