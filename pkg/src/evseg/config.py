"""Run configuration: flat ``section.key=value`` text files.

Example::

    seed=7
    train.epochs=30
    net.euga.rank=8
    loss.lambda2=0.5

``EVSEG_SEED`` in the environment overrides ``seed``. The top-level seed
feeds the network init, batch shuffling and the synthetic corpus.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import flatcfg
from .flatcfg import ConfigError
from .losses import LossConfig
from .network import NetConfig
from .progressive import ProgressiveConfig
from .synth import NoiseSpec
from .train import TrainConfig

SEED_ENV = "EVSEG_SEED"


@dataclass
class DataConfig:
    corpus: str = ""  # directory holding index.csv; empty means synthesise
    synth: int = 64
    size: int = 64
    blur_min: float = 0.5
    blur_max: float = 2.0

    def __post_init__(self):
        if self.synth < 1 or self.size < 16 or self.size % 4:
            raise ValueError("synth must be >= 1 and size a multiple of 4, >= 16")
        if not 0 <= self.blur_min <= self.blur_max:
            raise ValueError("need 0 <= blur_min <= blur_max")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    prog: ProgressiveConfig = field(default_factory=ProgressiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(sigma=0.4))
    data: DataConfig = field(default_factory=DataConfig)

    def resolved(self) -> "RunConfig":
        """Propagate the top-level seed and the epoch count into member configs."""
        return dataclasses.replace(
            self,
            net=dataclasses.replace(self.net, seed=self.seed),
            train=dataclasses.replace(self.train, seed=self.seed),
            loss=dataclasses.replace(self.loss, total_epochs=self.train.epochs),
        )


def load_config(path=None, overrides: list[str] | None = None, env=None) -> RunConfig:
    """Parse a config file plus ``key=value`` overrides; validate; resolve."""
    env = os.environ if env is None else env
    items: list[tuple[int | None, str, str]] = []
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        items.extend(flatcfg.parse_lines(p.read_text()))
    for raw in overrides or []:
        if "=" not in raw:
            raise ConfigError(f"override {raw!r} is not key=value")
        k, v = raw.split("=", 1)
        items.append((None, k.strip(), v.strip()))
    if env.get(SEED_ENV):
        items.append((None, "seed", env[SEED_ENV]))
    cfg = flatcfg.apply(RunConfig(), items)
    if cfg.data.corpus and not Path(cfg.data.corpus).exists():
        raise ConfigError(f"corpus directory {cfg.data.corpus} does not exist", field="data.corpus")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1", field="threads")
    return cfg.resolved()


def dump_config(cfg: RunConfig) -> str:
    return flatcfg.dumps(cfg)
