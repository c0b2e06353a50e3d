"""Mini-batch training: AdamW, a one-cycle schedule, prototype re-normalization,
temperature clamping and validation-driven early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, InvalidArgumentError, NumericFailure
from .model import (
    TAU_FLOOR,
    TAU_UNC,
    EncoderConfig,
    VoltaModel,
    backward,
    forward,
    init_model,
    loss_ce,
)

log = logging.getLogger(__name__)

VARIANTS = ("full", "fixed_tau", "shallow_encoder", "no_posthoc_ts", "mc_inference_control")
NO_DECAY_PREFIXES = ("gain", "shift", "tau")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, **kwargs) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()},
            v={k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()},
            **kwargs,
        )


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, weight_decay: float,
               no_decay=NO_DECAY_PREFIXES) -> tuple[dict, AdamWState]:
    """One decoupled-weight-decay Adam update.

    Decay multiplies each parameter by ``1 - lr * weight_decay`` before the
    bias-corrected Adam step. Names starting with any of ``no_decay`` are not
    decayed. Inputs are left untouched; new dicts are returned.
    """
    if lr < 0:
        raise InvalidArgumentError("learning rate must be non-negative")
    if set(params) != set(grads) or set(params) != set(state.m):
        raise InvalidArgumentError("params, grads and optimizer state must share keys")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidArgumentError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        if weight_decay and not name.startswith(tuple(no_decay)):
            p = p * (1.0 - lr * weight_decay)
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, m=new_m, v=new_v, step=step)


@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float
    total_steps: int
    warmup_frac: float = 0.10
    start_div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise InvalidArgumentError("warmup fraction must lie in (0, 1)")
        if self.start_div <= 1 or self.final_div <= 1:
            raise InvalidArgumentError("schedule divisors must exceed 1")
        if self.total_steps < 1:
            raise InvalidArgumentError("total_steps must be positive")

    @property
    def warmup_steps(self) -> int:
        return max(1, math.ceil(self.warmup_frac * self.total_steps))


def onecycle_lr(step: int, schedule: OneCycleSchedule) -> float:
    """Linear warm-up to ``max_lr`` then cosine decay to ``max_lr / final_div``."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise InvalidArgumentError(f"step {step} outside [0, {total}]")
    hi = schedule.max_lr
    lo_start = hi / schedule.start_div
    lo_end = hi / schedule.final_div
    w = schedule.warmup_steps
    if step <= w:
        return lo_start + (hi - lo_start) * step / w
    if total == w:
        return hi
    frac = (step - w) / (total - w)
    return lo_end + (hi - lo_end) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    ``hidden_dim=None`` makes the hidden layer as wide as the input.
    ``tau_optimizer`` chooses between an Adam step on the temperature
    (``"adamw"``, never weight-decayed) and a plain gradient step (``"sgd"``).
    """

    epochs: int = 100
    batch_size: int = 512
    lr: float = 3e-3
    weight_decay: float = 1e-3
    seed: int = 42
    tau0: float = 1.0
    dropout: float = 0.1
    variant: str = "full"
    patience: int = 20
    embed_dim: int = 32
    hidden_dim: int | None = None
    tau_floor: float = TAU_FLOOR
    tau_unc: float = TAU_UNC
    tau_optimizer: str = "adamw"
    warmup_frac: float = 0.10
    start_div: float = 25.0
    final_div: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mc_passes: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.patience < 0:
            raise ConfigError("patience must be non-negative")
        if self.tau0 <= 0 or self.tau_floor <= 0 or self.tau_unc <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {self.variant!r}; expected one of {VARIANTS}")
        if self.tau_optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown tau optimizer {self.tau_optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EffectiveConfig:
    """What an ablation variant changes relative to the full model."""

    shallow: bool = False
    learn_tau: bool = True
    tau0: float = 1.0
    posthoc: bool = True
    mc_passes: int = 0


def apply_ablation(config: TrainConfig) -> EffectiveConfig:
    variant = config.variant
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    if variant == "fixed_tau":
        return EffectiveConfig(learn_tau=False, tau0=1.0)
    if variant == "shallow_encoder":
        return EffectiveConfig(shallow=True, tau0=config.tau0)
    if variant == "no_posthoc_ts":
        return EffectiveConfig(posthoc=False, tau0=config.tau0)
    if variant == "mc_inference_control":
        return EffectiveConfig(tau0=config.tau0, mc_passes=config.mc_passes)
    return EffectiveConfig(tau0=config.tau0)


def encoder_config_for(config: TrainConfig, input_dim: int) -> EncoderConfig:
    if apply_ablation(config).shallow:
        return EncoderConfig.shallow(input_dim, config.embed_dim, dropout=config.dropout)
    return EncoderConfig.deep(input_dim, config.embed_dim, config.hidden_dim, dropout=config.dropout)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    tau: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "tau"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr), repr(r.tau)])


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    perm = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch])).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def validation_loss(model: VoltaModel, x, y) -> float:
    probs, _ = forward(model, x)
    return loss_ce(probs, y)


def train(train_x, train_y, val_x, val_y, config: TrainConfig,
          num_classes: int | None = None) -> tuple[VoltaModel, TrainingHistory]:
    """Fit a model on ``(train_x, train_y)``, early-stopping on ``(val_x, val_y)``.

    The returned model is the checkpoint with the lowest validation loss. Its
    ``tau_star`` is left unset; calibration is a separate step.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if len(train_x) == 0 or len(val_x) == 0:
        raise InvalidArgumentError("train and validation splits must be non-empty")
    if train_x.ndim != 2 or val_x.ndim != 2 or train_x.shape[1] != val_x.shape[1]:
        raise InvalidArgumentError("train and validation features must be 2-D with equal width")
    k = num_classes if num_classes is not None else int(max(train_y.max(), val_y.max())) + 1

    eff = apply_ablation(config)
    model = init_model(encoder_config_for(config, train_x.shape[1]), k, config.seed,
                       tau0=eff.tau0, tau_unc=config.tau_unc)
    model.mc_passes = eff.mc_passes

    steps_per_epoch = math.ceil(len(train_x) / config.batch_size)
    schedule = OneCycleSchedule(config.lr, config.epochs * steps_per_epoch, config.warmup_frac,
                                config.start_div, config.final_div)
    trainable = dict(model.params)
    if eff.learn_tau and config.tau_optimizer == "adamw":
        trainable["tau"] = np.array(model.tau)
    state = AdamWState.zeros_like(trainable, beta1=config.beta1, beta2=config.beta2,
                                  eps=config.adam_eps)

    history = TrainingHistory()
    best = model.copy()
    stall = 0
    step = 0
    lr = schedule.max_lr / schedule.start_div
    for epoch in range(config.epochs):
        loss_sum = 0.0
        for b, idx in enumerate(_batches(len(train_x), config.batch_size, config.seed, epoch)):
            probs, cache = forward(model, train_x[idx], train=True, seed=(epoch, b))
            loss = loss_ce(probs, train_y[idx])
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite training loss at epoch {epoch}, step {b}")
            grads = backward(cache, model, train_y[idx])
            lr = onecycle_lr(step, schedule)
            tau_grad = grads.pop("tau")
            if "tau" in trainable:
                grads["tau"] = np.array(tau_grad)
            trainable, state = adamw_step(trainable, grads, state, lr, config.weight_decay)
            new_tau = model.tau
            if "tau" in trainable:
                new_tau = float(trainable["tau"])
            elif eff.learn_tau:
                new_tau = model.tau - lr * tau_grad
            new_tau = max(new_tau, config.tau_floor)
            if "tau" in trainable:
                trainable["tau"] = np.array(new_tau)
            model.params = {name: trainable[name] for name in model.params}
            model.tau = new_tau
            loss_sum += loss * len(idx)
            step += 1
        val_loss = validation_loss(model, val_x, val_y)
        if not math.isfinite(val_loss):
            raise NumericFailure(f"non-finite validation loss at epoch {epoch}")
        history.records.append(EpochRecord(epoch, loss_sum / len(train_x), val_loss, lr, model.tau))
        log.debug("epoch %d train %.5f val %.5f tau %.4f", epoch, loss_sum / len(train_x),
                  val_loss, model.tau)
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best = model.copy()
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                history.stopped_early = True
                break
    return best, history
