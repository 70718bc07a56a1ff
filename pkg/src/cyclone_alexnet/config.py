"""Run configuration: one JSON document, validated before any work starts.

Schema (all keys optional, defaults shown by ``RunConfig().to_dict()``)::

    {
      "data_dir": "data/synth",          # dataset directory (images/ + labels.csv)
      "labels": null,                     # labels CSV; default <data_dir>/labels.csv
      "val_labels": null,                 # explicit validation CSV; otherwise split by storm
      "val_fraction": 0.2,
      "members": 10,                      # ensemble size
      "overlap": "one-third-adjacent",    # or "none"
      "seed": 0,
      "jobs": 1,
      "out_dir": "runs/default",
      "network": {...NetworkConfig fields...},
      "training": {...TrainHyper fields...}
    }
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .models import OVERLAP_POLICIES
from .network import NetworkConfig
from .training import TrainHyper


@dataclass
class RunConfig:
    data_dir: str | None = None
    labels: str | None = None
    val_labels: str | None = None
    val_fraction: float = 0.2
    members: int = 10
    overlap: str = "one-third-adjacent"
    seed: int = 0
    jobs: int = 1
    out_dir: str = "runs/default"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainHyper = field(default_factory=TrainHyper)

    def validate(self):
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.members < 1:
            raise ConfigError("members must be >= 1")
        if self.overlap not in OVERLAP_POLICIES:
            raise ConfigError(f"overlap must be one of {OVERLAP_POLICIES}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        self.network.validate()
        self.training.validate()
        return self

    @property
    def labels_path(self):
        if self.labels:
            return Path(self.labels)
        if self.data_dir is None:
            raise ConfigError("no dataset given (data_dir or labels)")
        return Path(self.data_dir) / "labels.csv"

    @property
    def image_dir(self):
        if self.data_dir is None:
            raise ConfigError("no dataset directory given")
        d = Path(self.data_dir)
        return d / "images" if (d / "images").is_dir() else d

    def to_dict(self):
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            net = NetworkConfig(**d.pop("network", {}))
            hyper = TrainHyper(**d.pop("training", {}))
            return cls(network=net, training=hyper, **d)
        except TypeError as e:
            raise ConfigError(f"bad config: {e}") from e

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
