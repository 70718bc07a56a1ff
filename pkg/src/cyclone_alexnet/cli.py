"""Command-line entry point: ``cyclone-alexnet <subcommand> ...``.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 numeric failure.
"""

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import (
    CycloneSample,
    DatasetIndex,
    attach_meta,
    event_disjoint_split,
    export_dataset,
    load_dataset,
    read_image,
    resize_image,
    write_labels,
)
from .errors import ConfigError, DataError, DimensionError, NumericError
from .evaluation import render_confusion, render_table, report_from_predictions
from .explain import ensemble_heatmap, overlay_export, to_gray8, write_pgm
from .models import (
    DistributedModel,
    GlobalEnsemble,
    bootstrap_train_ensemble,
    expert_ranges,
    load_any,
    moe_predict,
    save_distributed,
    save_ensemble,
    train_experts,
)
from .network import N_STAGES
from .synth import SPEED_MAX, SPEED_MIN, synth_generate

log = logging.getLogger("cyclone_alexnet")

OVERLAP_FLAGS = {"none": "none", "third": "one-third-adjacent"}


def _run_config(args):
    """File values first, then any flags given explicitly."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    simple = {
        "data": "data_dir",
        "labels": "labels",
        "val_labels": "val_labels",
        "val_fraction": "val_fraction",
        "members": "members",
        "seed": "seed",
        "jobs": "jobs",
        "out": "out_dir",
    }
    for flag, key in simple.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "overlap", None) is not None:
        cfg.overlap = OVERLAP_FLAGS[args.overlap]
    hyper = {}
    for flag in ("epochs", "steps_per_epoch", "lr"):
        value = getattr(args, flag, None)
        if value is not None:
            hyper[flag] = value
    if hyper:
        cfg.training = replace(cfg.training, **hyper)
    if getattr(args, "input_size", None) is not None:
        cfg.network = replace(cfg.network, input_size=args.input_size)
    return cfg.validate()


def _load_split(cfg, size):
    data = load_dataset(cfg.image_dir, cfg.labels_path, size=size)
    _report_rows(data)
    if cfg.val_labels:
        val = load_dataset(cfg.image_dir, cfg.val_labels, size=size)
        return data, val
    return event_disjoint_split(data, cfg.val_fraction, seed=cfg.seed)


def _report_rows(index):
    for lineno, image_id, msg in getattr(index, "row_errors", []):
        log.warning("labels line %d (%s): %s", lineno, image_id, msg)
    if len(index) == 0:
        raise DataError("no usable samples in dataset")


def _dataset_for(args, size):
    image_dir = Path(args.data)
    if (image_dir / "images").is_dir():
        image_dir = image_dir / "images"
    labels = Path(args.labels) if args.labels else Path(args.data) / "labels.csv"
    data = load_dataset(image_dir, labels, size=None if args.no_resize else size)
    _report_rows(data)
    if data.image_size != size:
        raise DataError(f"dataset images are {data.image_size}px but the model expects {size}px")
    meta = Path(args.data) / "meta.csv"
    if meta.is_file():
        attach_meta(data, meta)
    return data


# subcommands ---------------------------------------------------------------------


def cmd_synth(args):
    lo = args.speed_min if args.speed_min is not None else SPEED_MIN
    hi = args.speed_max if args.speed_max is not None else SPEED_MAX
    data = synth_generate(args.n, args.size, args.seed, speed_range=(lo, hi), noise=args.noise)
    try:
        export_dataset(data, args.out)
    except OSError as e:
        raise DataError(f"cannot write dataset to {args.out}: {e}") from e
    speeds = data.labels()
    print(f"wrote {len(data)} images, {len(data.storm_ids)} storms, speeds {speeds.min():.0f}-{speeds.max():.0f} kt to {args.out}")
    return 0


def cmd_split(args):
    cfg = _run_config(args)
    data = load_dataset(cfg.image_dir, cfg.labels_path)
    _report_rows(data)
    train, val = event_disjoint_split(data, cfg.val_fraction, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(train, out / "train.csv")
    write_labels(val, out / "val.csv")
    print(f"train: {len(train)} images / {len(train.storm_ids)} storms; val: {len(val)} images / {len(val.storm_ids)} storms")
    return 0


def cmd_train_global(args):
    cfg = _run_config(args)
    train, val = _load_split(cfg, cfg.network.input_size)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run_config.json")
    ensemble, reports = bootstrap_train_ensemble(
        train, cfg.network, cfg.training, m=cfg.members, seed=cfg.seed, val=val, jobs=cfg.jobs
    )
    hist = out / "history"
    hist.mkdir(exist_ok=True)
    for k, rep in enumerate(reports):
        rep.write_csv(hist / f"member_{k:02d}.csv")
    val_rmse = None
    if len(val):
        val_rmse = float(np.sqrt(np.mean((ensemble.predict(val.images()) - val.labels()) ** 2)))
    save_ensemble(
        ensemble,
        out / "ensemble",
        extra={"val_storms": val.storm_ids, "train_storms": train.storm_ids, "val_rmse": val_rmse},
    )
    print(f"trained {len(ensemble)} members; ensemble val RMSE {val_rmse if val_rmse is None else f'{val_rmse:.6f}'}")
    return 0


def cmd_train_experts(args):
    cfg = _run_config(args)
    gate = load_any(args.gate)
    net = replace(cfg.network, input_size=gate.config.input_size)
    train, val = _load_split(cfg, net.input_size)
    max_speed = float(max(train.labels().max(), val.labels().max() if len(val) else 0))
    ranges = expert_ranges(max_speed, cfg.overlap)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run_config.json")
    experts, reports = train_experts(train, ranges, net, cfg.training, seed=cfg.seed, val=val, jobs=cfg.jobs)
    hist = out / "history"
    hist.mkdir(exist_ok=True)
    for code, rep in reports.items():
        rep.write_csv(hist / f"expert_{code}.csv")
    dm = DistributedModel(gate, experts, cfg.overlap, ranges)
    if dm.fallbacks:
        print(f"warning: no expert for {', '.join(dm.fallbacks)} (gate-only fallback)", file=sys.stderr)
    save_distributed(dm, out / "distributed", extra={"max_speed": max_speed})
    print(f"trained experts {', '.join(experts)}; overlap policy {cfg.overlap}")
    return 0


def _predict_rows(model, data):
    images = data.images()
    if isinstance(model, DistributedModel):
        final, diag = moe_predict(model, images)
        return final, diag
    return np.asarray(model.predict(images), dtype=np.float64), None


def _write_predictions(path, data, yhat, diag):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["image_id", "wind_speed", "prediction"]
        if diag is not None:
            header += ["gate", "category", "expert", "fallback"]
        writer.writerow(header)
        for i, s in enumerate(data):
            row = [s.image_id, s.wind_speed, repr(float(yhat[i]))]
            if diag is not None:
                e = diag["expert"][i]
                row += [repr(float(diag["gate"][i])), diag["category"][i], "" if np.isnan(e) else repr(float(e)), int(diag["fallback"][i])]
            writer.writerow(row)


class _LabelOracle:
    """Debug predictor that returns the true labels."""

    def __init__(self, data):
        self.labels = data.labels()

    def predict(self, images):
        return self.labels[: len(images)]


def _images_only(args, size):
    data_dir = Path(args.data)
    image_dir = data_dir / "images" if (data_dir / "images").is_dir() else data_dir
    samples = []
    for path in sorted(p for p in image_dir.iterdir() if p.is_file()):
        img = read_image(path)
        if img.shape[0] != size and not args.no_resize:
            img = resize_image(img, size)
        samples.append(CycloneSample(path.stem, "", img, 1.0))
    return DatasetIndex(samples)


def cmd_predict(args):
    model = load_any(args.model)
    size = model.config.input_size
    has_labels = args.labels or (Path(args.data) / "labels.csv").is_file()
    data = _dataset_for(args, size) if has_labels else _images_only(args, size)
    yhat, diag = _predict_rows(model, data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_predictions(out, data, yhat, diag)
    print(f"wrote {len(yhat)} predictions to {out}")
    return 0


def cmd_evaluate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.debug_oracle:
        model = None
        size = args.input_size or 64
    else:
        model = load_any(args.model)
        size = model.config.input_size
    data = _dataset_for(args, size)
    extra = {}
    if model is None:
        extra["model_kind"] = "label-oracle"
        yhat, diag = _LabelOracle(data).predict(data.images()), None
    else:
        yhat, diag = _predict_rows(model, data)
        if isinstance(model, DistributedModel):
            extra.update(
                model_kind="distributed",
                overlap_policy=model.overlap_policy,
                experts=sorted(model.experts),
                fallbacks=model.fallbacks,
            )
            gate = model.gate
            extra["gate_member_count"] = len(gate) if isinstance(gate, GlobalEnsemble) else 1
        elif isinstance(model, GlobalEnsemble):
            extra.update(model_kind="ensemble", member_count=len(model))
        else:
            extra["model_kind"] = "single"
    report = report_from_predictions(yhat, data.labels(), **extra)
    (out / "report.json").write_text(report.to_json() + "\n")
    label = args.label or {"distributed": "Local AlexNets"}.get(extra["model_kind"], "Global AlexNet")
    text = render_table({label: report}) + "\n" + render_confusion(report)
    (out / "report.txt").write_text(text)
    _write_predictions(out / "predictions.csv", data, yhat, diag)
    if diag is not None:
        _write_predictions(out / "routing.csv", data, yhat, diag)
    print(text, end="")
    return 0


def cmd_explain(args):
    model = load_any(args.model)
    if isinstance(model, DistributedModel):
        model = model.gate
    size = model.config.input_size
    image = read_image(args.image)
    if image.shape[0] != image.shape[1]:
        raise DataError(f"image is not square: {image.shape}")
    if image.shape[0] != size:
        image = resize_image(image, size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    members, median = ensemble_heatmap(model, image, layer=args.layer)
    write_pgm(out / "original.pgm", to_gray8(image))
    for h in members:
        overlay_export(image, h, out / h.source)
    paths = overlay_export(image, median, out / "median")
    print(f"wrote {len(members)} member heatmaps and median overlay {paths['overlay']}")
    return 0


# parser ------------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="cyclone-alexnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic vortex dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.04)
    p.add_argument("--speed-min", type=int)
    p.add_argument("--speed-max", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def run_flags(p, training=True):
        p.add_argument("--config", help="RunConfig JSON; flags override its values")
        p.add_argument("--data", help="dataset directory (images/ + labels.csv)")
        p.add_argument("--labels", help="labels CSV (default <data>/labels.csv)")
        p.add_argument("--val-fraction", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if training:
            p.add_argument("--val-labels", help="explicit validation labels CSV")
            p.add_argument("--epochs", type=int)
            p.add_argument("--steps-per-epoch", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--jobs", type=int)
            p.add_argument("--input-size", type=int)

    p = sub.add_parser("split", help="storm-disjoint train/val split of a labels file")
    run_flags(p, training=False)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-global", help="train the bagged global ensemble")
    run_flags(p)
    p.add_argument("--members", type=int)
    p.set_defaults(func=cmd_train_global)

    p = sub.add_parser("train-experts", help="train per-category experts behind a gate")
    run_flags(p)
    p.add_argument("--gate", required=True, help="gate checkpoint (ensemble or single model)")
    p.add_argument("--overlap", choices=sorted(OVERLAP_FLAGS))
    p.set_defaults(func=cmd_train_experts)

    def eval_flags(p):
        p.add_argument("--model", help="checkpoint directory (single, ensemble or distributed)")
        p.add_argument("--data", required=True)
        p.add_argument("--labels")
        p.add_argument("--no-resize", action="store_true", help="reject images whose size differs from the model's")

    p = sub.add_parser("predict", help="write predictions for a dataset")
    eval_flags(p)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics report (JSON + table)")
    eval_flags(p)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--label", help="column name in the text table")
    p.add_argument("--debug-oracle", action="store_true", help="score a predictor that returns the labels")
    p.add_argument("--input-size", type=int, help="image size for --debug-oracle")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="grad-CAM heatmaps and overlays for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, choices=range(1, N_STAGES + 1), default=N_STAGES, metavar="{1..5}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "evaluate" and not args.debug_oracle and not args.model:
        parser.error("evaluate needs --model unless --debug-oracle is given")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DimensionError as e:
        print(f"shape error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        for row in e.row_errors[:20]:
            print(f"  {row}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
