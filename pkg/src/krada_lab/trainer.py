"""Training loop for known-region-aware adversarial adaptation, plus baselines.

Each step, in order:

1. segmentation loss of ``C`` on the source batch plus ``alpha`` times its
   loss on the target batch's pseudo-labels from the previous visit;
2. segmentation loss of ``C_star`` on the source batch;
3. fresh unknown pseudo-labels and the known-region mask from ``C_star``'s
   target probabilities;
4. the masked adversarial loss;
5. one SGD update per parameter group: ``F`` descends
   ``L_seg + L_seg_star - L_adv``, ``C`` descends ``L_seg``, ``D`` descends
   ``L_adv`` and ``C_star`` descends ``L_seg_star``.

All four updates come from a single backward pass of
``L_seg + L_seg_star - L_adv``; ``D`` then steps with ``sign=-1`` so it still
descends ``L_adv``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericalError
from .losses import (
    LossBundle,
    masked_adv_loss,
    source_seg_loss,
    star_seg_loss,
    target_pseudo_loss,
)
from .metrics import ConfusionAccumulator, MetricReport, image_level_report, iou_report
from .networks import (
    Conv,
    Discriminator,
    SegModel,
    classify,
    forward_features,
    init_model,
    param_set,
)
from .openset import generate_pseudo_labels, known_region_mask
from .rng import stream
from .tensor import Tape, Tensor, add, scale, sgd_step, softmax_channels, sub

log = logging.getLogger(__name__)

MODES = ("krada", "krada_no_mask", "source_only", "source_only_pl", "csdas")
ADV_MODES = ("algorithm1", "nonsaturating")


@dataclass(frozen=True)
class TrainConfig:
    delta: float = 1.0
    alpha: float = 0.1
    lr: float = 0.05
    iterations: int = 1500
    batch_size: int = 4
    seed: int = 0
    metric: str = "kl"
    mode: str = "krada"
    adv_mode: str = "algorithm1"
    adv_weight: float = 1.0

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not self.delta > 0:
            raise ConfigError("delta must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.metric not in ("kl", "kolmogorov"):
            raise ConfigError(f"metric must be 'kl' or 'kolmogorov', got {self.metric!r}")
        if self.adv_mode not in ADV_MODES:
            raise ConfigError(f"adv_mode must be one of {ADV_MODES}, got {self.adv_mode!r}")
        if self.adv_weight < 0:
            raise ConfigError("adv_weight must be >= 0")

    # mode switches
    @property
    def uses_pseudo(self) -> bool:
        return self.mode in ("krada", "krada_no_mask", "source_only_pl")

    @property
    def uses_disc(self) -> bool:
        return self.mode in ("krada", "krada_no_mask", "csdas")

    @property
    def uses_mask(self) -> bool:
        return self.mode == "krada"

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.uses_pseudo else 0.0


class PseudoLabelStore:
    """Unknown-channel pseudo-labels per target image, with the iteration that wrote them."""

    def __init__(self, n: int, K: int, height: int, width: int):
        self.K = K
        self.unknown = np.zeros((n, height, width), dtype=bool)
        self.version = np.zeros(n, dtype=np.int64)

    def get(self, idx) -> np.ndarray:
        """One-hot ``len(idx) x (K+1) x H x W`` maps."""
        u = self.unknown[idx]
        out = np.zeros((len(u), self.K + 1) + u.shape[1:])
        out[:, self.K] = u
        return out

    def put(self, idx, labels: np.ndarray, t: int) -> None:
        if np.any(t <= self.version[idx]):
            raise ValueError("pseudo-label versions must increase")
        self.unknown[idx] = labels[:, self.K] > 0
        self.version[idx] = t


@dataclass
class TrainState:
    model: SegModel
    disc: Discriminator
    store: PseudoLabelStore
    config: TrainConfig
    t: int = 0


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W
    labels: np.ndarray | None = None  # N x H x W, 1-based classes

    def __len__(self) -> int:
        return len(self.images)


def init_state(config: TrainConfig, K: int, n_target: int, height: int, width: int,
               in_channels: int = 3) -> TrainState:
    config.validate()
    model, disc = init_model(K, in_channels, config.seed)
    return TrainState(model, disc, PseudoLabelStore(n_target, K, height, width), config)


def batch_indices(seed: int, name: str, n: int, batch_size: int, t: int) -> np.ndarray:
    """Indices for step ``t`` (0-based) of a shuffled-per-epoch pass over ``n`` items."""
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(t, per_epoch)
    perm = stream(seed, name, epoch).permutation(n)
    return perm[k * batch_size:(k + 1) * batch_size]


def train_step(state: TrainState, xS, yS, xT, t_idx) -> LossBundle:
    cfg = state.config
    model, disc = state.model, state.disc
    K = model.K
    alpha = cfg.effective_alpha
    t = state.t + 1
    unknown_fraction = 0.0

    with Tape() as tape:
        fS = forward_features(model, xS)
        L_S = source_seg_loss(model, xS, yS, fS)
        need_target = cfg.uses_pseudo or cfg.uses_disc
        fT = forward_features(model, xT) if need_target else None
        if cfg.uses_pseudo:
            L_T = target_pseudo_loss(model, xT, state.store.get(t_idx), fT)
        else:
            L_T = Tensor(0.0)
        L_seg = add(L_S, scale(L_T, alpha)) if alpha else L_S
        L_star = star_seg_loss(model, xS, yS, fS)

        mask = np.ones((len(xT),) + xT.shape[2:])
        if cfg.uses_pseudo:
            probs = softmax_channels(classify(model.C_star, fT.detach())).data
            pseudo = generate_pseudo_labels(probs, cfg.delta, cfg.metric)
            state.store.put(t_idx, pseudo, t)
            unknown_fraction = float(pseudo[:, K].mean())
            if cfg.uses_mask:
                mask = known_region_mask(pseudo)

        total = add(L_seg, L_star)
        L_adv = None
        if cfg.uses_disc:
            if cfg.adv_mode == "algorithm1":
                L_adv = masked_adv_loss(disc, fS, fT, mask)
                total = sub(total, scale(L_adv, cfg.adv_weight))
            else:
                L_disc = masked_adv_loss(disc, fS.detach(), fT.detach(), mask)
                frozen = Discriminator([Conv(l.weight.detach(), l.bias.detach()) for l in disc.layers])
                L_gen = masked_adv_loss(frozen, fS, fT, mask, role="generator")
                total = add(add(total, scale(L_gen, cfg.adv_weight)), L_disc)
                L_adv = L_disc

    bundle = LossBundle(
        L_seg_S=L_S.item(), L_seg_T=L_T.item(), L_seg=L_seg.item(), L_seg_star=L_star.item(),
        L_adv=L_adv.item() if L_adv is not None else 0.0, alpha=alpha, delta=cfg.delta,
        lr=cfg.lr, N=cfg.iterations, unknown_fraction=unknown_fraction,
    )
    values = [bundle.L_seg_S, bundle.L_seg_T, bundle.L_seg_star, bundle.L_adv]
    if not all(math.isfinite(v) for v in values):
        raise NumericalError(f"non-finite loss at iteration {t}: {bundle}")

    tape.backward(total)
    ps = param_set(model, disc)
    for group in ("F", "C", "C_star"):
        sgd_step(ps.group(group), cfg.lr)
    if cfg.uses_disc:
        # algorithm1: D's gradient is that of -adv_weight * L_adv
        if cfg.adv_mode == "algorithm1":
            if cfg.adv_weight > 0:
                sgd_step(ps.group("D"), cfg.lr / cfg.adv_weight, sign=-1)
            else:
                ps.zero_grad()
        else:
            sgd_step(ps.group("D"), cfg.lr)
    for _, name, p in ps.named():
        if not np.all(np.isfinite(p.data)):
            raise NumericalError(f"parameter {name} became non-finite at iteration {t}")
    state.t = t
    return bundle


def predict(model: SegModel, images, batch: int = 32) -> np.ndarray:
    """Per-pixel argmax over the ``K + 1`` open-set logits, as labels ``1..K+1``."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for i in range(0, len(images), batch):
        logits = classify(model.C, forward_features(model, images[i:i + batch])).data
        out.append(np.argmax(logits, axis=1) + 1)
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)


def evaluate(model: SegModel, data: Dataset, tau: float = 0.001) -> MetricReport:
    pred = predict(model, data.images)
    acc = ConfusionAccumulator(model.K).accumulate(data.labels, pred)
    report = iou_report(acc)
    unk = model.K + 1
    per_image = [(bool((g == unk).any()), int((p == unk).sum())) for g, p in zip(data.labels, pred)]
    n_pixels = int(np.prod(data.labels.shape[1:]))
    return image_level_report(per_image, tau, n_pixels, report=report)


@dataclass
class TrainResult:
    state: TrainState
    trace: list[LossBundle] = field(default_factory=list)
    snapshots: list[tuple[int, MetricReport]] = field(default_factory=list)


def train(config: TrainConfig, source: Dataset, target: Dataset, K: int,
          eval_data: Dataset | None = None, eval_every: int = 0,
          state: TrainState | None = None, until: int | None = None,
          on_step: Callable[[TrainState, LossBundle], None] | None = None) -> TrainResult:
    """Run steps ``state.t + 1 .. until`` (default: ``config.iterations``).

    Passing a previously saved ``state`` resumes training; batch order depends
    only on the seed and step number, so a resumed run replays exactly.
    """
    config.validate()
    if len(source) == 0 or len(target) == 0:
        raise ConfigError("source and target datasets must be nonempty")
    if state is None:
        state = init_state(config, K, len(target), *target.images.shape[2:],
                           in_channels=source.images.shape[1])
    else:
        state.config = config
    stop = config.iterations if until is None else min(until, config.iterations)
    result = TrainResult(state)
    while state.t < stop:
        t0 = state.t
        s_idx = batch_indices(config.seed, "source-shuffle", len(source), config.batch_size, t0)
        t_idx = batch_indices(config.seed, "target-shuffle", len(target), config.batch_size, t0)
        bundle = train_step(state, source.images[s_idx], source.labels[s_idx],
                            target.images[t_idx], t_idx)
        result.trace.append(bundle)
        if on_step is not None:
            on_step(state, bundle)
        if eval_data is not None and eval_every and state.t % eval_every == 0:
            report = evaluate(state.model, eval_data)
            result.snapshots.append((state.t, report))
            log.info("iter %d: mIoU %.3f mIoU* %.3f unk %.3f", state.t, report.miou,
                     report.miou_star, report.unknown_iou)
    return result


def mode_config(base: TrainConfig, mode: str, metric: str | None = None) -> TrainConfig:
    return replace(base, mode=mode, metric=metric or base.metric)
