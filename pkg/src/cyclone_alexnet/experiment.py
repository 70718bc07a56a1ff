"""Desk-scale end-to-end run on synthetic data.

Generates a synthetic dataset, holds out storms for test and validation,
then trains single networks over several seeds, a bagged global ensemble and
a gated set of experts, and scores everything on the same test storms.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import BatchSampler, SamplerConfig, event_disjoint_split
from .evaluation import report_from_predictions
from .explain import ensemble_heatmap, grad_cam
from .models import DistributedModel, GlobalEnsemble, bootstrap_train_ensemble, expert_ranges, moe_predict, train_experts
from .network import NetworkConfig, build_alexnet
from .rng import derive_seed
from .synth import synth_generate
from .training import TrainHyper, train

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    n: int = 2000
    size: int = 64
    data_seed: int = 0
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    single_seeds: tuple = (0, 1, 2, 3, 4)
    members: int = 5
    ensemble_seed: int = 10
    expert_seed: int = 20
    overlap: str = "one-third-adjacent"
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(dropout_rate=0.2))
    training: TrainHyper = field(default_factory=lambda: TrainHyper(epochs=15, lr=3e-3))


def split_three_way(data, cfg):
    rest, test = event_disjoint_split(data, cfg.test_fraction, seed=cfg.data_seed + 1000)
    train_set, val = event_disjoint_split(rest, cfg.val_fraction, seed=cfg.data_seed + 2000)
    return train_set, val, test


def run_desk_experiment(cfg=None, with_distributed=True):
    """Returns a dict of datasets, models, predictions and reports."""
    cfg = cfg or DeskConfig()
    t0 = time.perf_counter()
    data = synth_generate(cfg.n, cfg.size, cfg.data_seed)
    train_set, val, test = split_three_way(data, cfg)
    x_test, y_test = test.arrays()
    val_arrays = val.arrays()
    out = {"config": cfg, "train": train_set, "val": val, "test": test}
    out["baseline_rmse"] = float(np.sqrt(np.mean((y_test - train_set.labels().mean()) ** 2)))

    singles = []
    for s in cfg.single_seeds:
        seed = derive_seed(s, 300)
        model = build_alexnet(cfg.network, seed)
        sampler = BatchSampler(train_set, SamplerConfig(cfg.training.rotation_fraction, cfg.training.rotation_policy, seed))
        rep = train(model, sampler, cfg.training, val_set=val_arrays, seed=seed)
        pred = model.predict(x_test)
        singles.append({"seed": s, "model": model, "report": rep, "test": report_from_predictions(pred, y_test)})
        log.info("single seed %d: test RMSE %.2f", s, singles[-1]["test"].rmse)
    out["singles"] = singles

    ensemble, reports = bootstrap_train_ensemble(
        train_set, cfg.network, cfg.training, m=cfg.members, seed=cfg.ensemble_seed, val=val
    )
    ens_pred = ensemble.predict(x_test)
    out["ensemble"] = ensemble
    out["ensemble_reports"] = reports
    out["ensemble_test"] = report_from_predictions(ens_pred, y_test, member_count=len(ensemble))
    log.info("ensemble: test RMSE %.2f", out["ensemble_test"].rmse)

    if with_distributed:
        max_speed = float(train_set.labels().max())
        ranges = expert_ranges(max_speed, cfg.overlap)
        experts, expert_reports = train_experts(
            train_set, ranges, cfg.network, cfg.training, seed=cfg.expert_seed, val=val
        )
        dm = DistributedModel(ensemble, experts, cfg.overlap, ranges)
        final, diag = moe_predict(dm, x_test)
        out["distributed"] = dm
        out["expert_reports"] = expert_reports
        out["distributed_diag"] = diag
        out["distributed_test"] = report_from_predictions(final, y_test, experts=sorted(experts))
        log.info("distributed: test RMSE %.2f", out["distributed_test"].rmse)
    out["seconds"] = time.perf_counter() - t0
    return out


def eye_focus_rate(model, samples, layer=3, tolerance=0.25):
    """Fraction of ``samples`` whose heatmap argmax lies near the synthetic eye.

    ``samples`` need ``eye_row``/``eye_col`` metadata (as written by the
    generator). A hit is an argmax pixel within ``tolerance * width`` of the
    eye centre. Ensembles are judged on their median heatmap.
    """
    samples = list(samples)
    if not samples:
        return float("nan")
    hits = 0
    for s in samples:
        if isinstance(model, GlobalEnsemble):
            values = ensemble_heatmap(model, s.image, layer)[1].values
        else:
            values = grad_cam(model, s.image, layer).values
        i, j = np.unravel_index(np.argmax(values), values.shape)
        dist = np.hypot(i - s.meta["eye_row"], j - s.meta["eye_col"])
        hits += dist <= tolerance * values.shape[1]
    return hits / len(samples)
