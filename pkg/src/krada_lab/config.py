"""Experiment configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected. The
fully-resolved configuration (defaults included) is written next to every
run's outputs so it can be fed back in verbatim.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .synthworld import SceneSpec
from .trainer import TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    # scene
    seed: int = 0
    K: int = 4
    height: int = 32
    width: int = 32
    shapes_min: int = 1
    shapes_max: int = 3
    size_min: int = 4
    size_max: int = 8
    gray: float = 0.5
    chroma: float = 0.3
    source_noise: float = 0.02
    hue_shift: float = 30.0
    brightness: float = 0.1
    noise: float = 0.06
    unknown_prob: float = 0.7
    n_source: int = 200
    n_target: int = 200
    n_test: int = 100
    # training
    mode: str = "krada"
    metric: str = "kl"
    delta: float = 1.0
    ko_delta: float = 0.2
    alpha: float = 0.1
    lr: float = 0.05
    iterations: int = 1500
    batch_size: int = 4
    adv_mode: str = "algorithm1"
    adv_weight: float = 1.0
    # evaluation, calibration, bookkeeping
    eval_every: int = 0
    ckpt_every: int = 0
    tau_img: float = 0.001
    calib_steps: int = 5
    calib_step_size: float = 0.2
    calib_iters: int = 300
    data_dir: str = ""
    ckpt_dir: str = ""
    report_dir: str = ""

    def scene(self) -> SceneSpec:
        names = {f.name for f in fields(SceneSpec)}
        return SceneSpec(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def train(self, **overrides) -> TrainConfig:
        cfg = replace(self, **overrides) if overrides else self
        delta = cfg.ko_delta if cfg.metric == "kolmogorov" else cfg.delta
        return TrainConfig(delta=delta, alpha=cfg.alpha, lr=cfg.lr, iterations=cfg.iterations,
                           batch_size=cfg.batch_size, seed=cfg.seed, metric=cfg.metric,
                           mode=cfg.mode, adv_mode=cfg.adv_mode, adv_weight=cfg.adv_weight)

    def validate(self) -> None:
        self.scene().validate()
        self.train().validate()
        if not self.ko_delta > 0:
            raise ConfigError("ko_delta must be > 0")
        if min(self.n_source, self.n_target, self.n_test) < 1:
            raise ConfigError("dataset sizes must be >= 1")
        if not 0 <= self.tau_img < 1:
            raise ConfigError("tau_img must lie in [0, 1)")
        if self.calib_steps < 1 or self.calib_iters < 0:
            raise ConfigError("calib_steps must be >= 1 and calib_iters >= 0")
        if self.eval_every < 0 or self.ckpt_every < 0:
            raise ConfigError("eval_every and ckpt_every must be >= 0")

    def paths(self, out: Path) -> tuple[Path, Path, Path]:
        return (Path(self.data_dir) if self.data_dir else out / "data",
                Path(self.ckpt_dir) if self.ckpt_dir else out / "checkpoints",
                Path(self.report_dir) if self.report_dir else out / "reports")


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def coerce(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown configuration key {key!r}")
    kind = FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        values[key] = coerce(key, val.strip())
    return replace(base or ExperimentConfig(), **values)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse(text)


def dump(cfg: ExperimentConfig) -> str:
    lines = ["# resolved krada-lab configuration"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def write(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(dump(cfg))
