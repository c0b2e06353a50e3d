"""Prototype classifier on the unit hypersphere with a hand-written backward pass.

An encoder maps feature vectors ``h`` to raw embeddings ``v``; embeddings are
L2-normalized to ``z`` and compared with unit-norm class prototypes ``p_k``.
Logits are cosine similarities divided by a learnable temperature ``tau``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf, expit

from .core_math import as_f64, l2_normalize, normalize_vjp, softmax
from .errors import InvalidArgumentError, NumericFailure

LN_EPS = 1e-5
TAU_FLOOR = 1e-3
TAU_UNC = 0.1
PROB_FLOOR = 1e-300
CHECKPOINT_FORMAT = "volta-checkpoint"
CHECKPOINT_VERSION = 1

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    """Layer layout of the encoder.

    Each layer is ``linear -> layer norm -> activation -> dropout``; widths go
    ``input_dim -> *hidden_dims -> embed_dim``. With ``residual`` a learned
    linear projection of the raw input is added to the last layer's output.
    """

    input_dim: int
    embed_dim: int
    hidden_dims: tuple[int, ...] = ()
    residual: bool = False
    dropout: float = 0.0
    ln_eps: float = LN_EPS
    layer_norm: bool = True
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        widths = (self.input_dim, *self.hidden_dims, self.embed_dim)
        if any(int(w) <= 0 for w in widths):
            raise InvalidArgumentError(f"all layer widths must be positive, got {widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.activation not in ("gelu", "identity"):
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.ln_eps <= 0:
            raise InvalidArgumentError("ln_eps must be positive")

    @classmethod
    def deep(cls, input_dim: int, embed_dim: int, hidden_dim: int | None = None,
             dropout: float = 0.1) -> "EncoderConfig":
        hidden = input_dim if hidden_dim is None else hidden_dim
        return cls(input_dim, embed_dim, (hidden,), residual=True, dropout=dropout)

    @classmethod
    def shallow(cls, input_dim: int, embed_dim: int, dropout: float = 0.1) -> "EncoderConfig":
        return cls(input_dim, embed_dim, (), residual=False, dropout=dropout)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.embed_dim)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{**d, "hidden_dims": tuple(d.get("hidden_dims", ()))})


def parameter_shapes(config: EncoderConfig, num_classes: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    widths = config.widths
    for i in range(config.n_layers):
        shapes[f"W{i}"] = (widths[i + 1], widths[i])
        shapes[f"b{i}"] = (widths[i + 1],)
        if config.layer_norm:
            shapes[f"gain{i}"] = (widths[i + 1],)
            shapes[f"shift{i}"] = (widths[i + 1],)
    if config.residual:
        shapes["R"] = (config.embed_dim, config.input_dim)
    shapes["ptilde"] = (num_classes, config.embed_dim)
    return shapes


@dataclass
class VoltaModel:
    """Encoder weights, unconstrained prototypes and the three temperatures.

    ``params`` holds every array-valued parameter, including the
    unconstrained prototypes under ``"ptilde"``. ``tau_star`` is ``None``
    until post-hoc calibration has run.
    """

    config: EncoderConfig
    params: dict[str, np.ndarray]
    tau: float = 1.0
    tau_star: float | None = None
    tau_unc: float = TAU_UNC
    seed: int = 0
    mc_passes: int = 0

    def __post_init__(self):
        expected = parameter_shapes(self.config, self.num_classes)
        if set(expected) != set(self.params):
            raise InvalidArgumentError(
                f"parameter names {sorted(self.params)} do not match {sorted(expected)}"
            )
        for name, shape in expected.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise InvalidArgumentError(f"{name} has shape {arr.shape}, expected {shape}")
            self.params[name] = arr
        if not self.tau > 0 or not self.tau_unc > 0:
            raise InvalidArgumentError("temperatures must be positive")

    @property
    def num_classes(self) -> int:
        return int(np.asarray(self.params["ptilde"]).shape[0])

    @property
    def prototypes(self) -> np.ndarray:
        """Unit-norm prototype rows, recomputed from ``ptilde``."""
        return l2_normalize(self.params["ptilde"])

    @property
    def calibrated_tau(self) -> float:
        return self.tau if self.tau_star is None else self.tau_star

    def n_parameters(self) -> int:
        return sum(int(a.size) for a in self.params.values()) + 1

    def copy(self) -> "VoltaModel":
        return VoltaModel(self.config, {k: v.copy() for k, v in self.params.items()},
                          self.tau, self.tau_star, self.tau_unc, self.seed, self.mc_passes)


def init_model(config: EncoderConfig, num_classes: int, seed: int, tau0: float = 1.0,
               tau_unc: float = TAU_UNC) -> VoltaModel:
    """He-normal weights, zero biases, unit gains, Gaussian prototypes."""
    if num_classes < 1:
        raise InvalidArgumentError("num_classes must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config, num_classes).items():
        if name == "ptilde":
            params[name] = rng.standard_normal(shape)
        elif name[0] in "WR":
            params[name] = rng.standard_normal(shape) * math.sqrt(2.0 / shape[1])
        elif name.startswith("gain"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return VoltaModel(config, params, tau=float(tau0), tau_unc=tau_unc, seed=seed)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def dropout_rng(seed: int, *counter: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, *counter]))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    xhat: list[np.ndarray] = field(default_factory=list)
    inv_std: list[np.ndarray] = field(default_factory=list)
    normed: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    v: np.ndarray | None = None
    z: np.ndarray | None = None
    similarities: np.ndarray | None = None
    logits: np.ndarray | None = None
    probabilities: np.ndarray | None = None
    tau: float = 1.0


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"non-finite values in {where}")


def encode(model: VoltaModel, x, train: bool = False, rng: np.random.Generator | None = None,
           cache: ForwardCache | None = None) -> np.ndarray:
    """Raw embeddings ``v`` for a batch of feature rows."""
    cfg = model.config
    x = as_f64(x, "batch")
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise InvalidArgumentError(
            f"batch must have shape (n, {cfg.input_dim}), got {x.shape}"
        )
    if train and cfg.dropout > 0 and rng is None:
        raise InvalidArgumentError("train mode with dropout needs a random generator")
    p = model.params
    h = x
    for i in range(cfg.n_layers):
        a = h @ p[f"W{i}"].T + p[f"b{i}"]
        if cfg.layer_norm:
            mu = a.mean(axis=1, keepdims=True)
            centered = a - mu
            inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + cfg.ln_eps)
            xhat = centered * inv_std
            n = xhat * p[f"gain{i}"] + p[f"shift{i}"]
        else:
            inv_std = xhat = None
            n = a
        o = gelu(n) if cfg.activation == "gelu" else n
        mask = None
        if train and cfg.dropout > 0:
            keep = rng.random(o.shape) >= cfg.dropout
            mask = keep / (1.0 - cfg.dropout)
            o = o * mask
        _check_finite(o, f"encoder layer {i}")
        if cache is not None:
            cache.layer_inputs.append(h)
            cache.xhat.append(xhat)
            cache.inv_std.append(inv_std)
            cache.normed.append(n)
            cache.masks.append(mask)
        h = o
    if cfg.residual:
        h = h + x @ p["R"].T
        _check_finite(h, "residual projection")
    return h


def forward(model: VoltaModel, x, train: bool = False, seed: int | tuple[int, ...] | None = None,
            tau: float | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Class probabilities and the cache needed by :func:`backward`.

    In train mode dropout masks come from ``seed`` (an int or a tuple of
    counters); eval mode is deterministic and ignores it.
    """
    rng = None
    if train and model.config.dropout > 0:
        if seed is None:
            raise InvalidArgumentError("train mode with dropout needs a seed")
        counters = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
        rng = dropout_rng(model.seed, *counters)
    t = model.tau if tau is None else float(tau)
    cache = ForwardCache(inputs=np.asarray(x, dtype=np.float64), tau=t)
    v = encode(model, x, train=train, rng=rng, cache=cache)
    z = l2_normalize(v)
    sims = z @ model.prototypes.T
    logits = sims / t
    _check_finite(logits, "logits")
    probs = softmax(logits)
    cache.v, cache.z, cache.similarities, cache.logits, cache.probabilities = v, z, sims, logits, probs
    return probs, cache


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise InvalidArgumentError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise InvalidArgumentError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= k):
        raise InvalidArgumentError(f"labels must lie in [0, {k})")
    return y


def loss_ce(probabilities, labels) -> float:
    """Mean negative log-probability of the true class."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise InvalidArgumentError("probabilities must be a non-empty (n, K) array")
    y = _check_labels(labels, probs.shape[0], probs.shape[1])
    picked = probs[np.arange(len(y)), y]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def backward(cache: ForwardCache, model: VoltaModel, labels) -> dict[str, np.ndarray | float]:
    """Gradients of the batch-mean cross-entropy for every parameter and ``tau``.

    Returns a dict keyed like ``model.params`` plus ``"tau"``.
    """
    probs = cache.probabilities
    if probs is None:
        raise InvalidArgumentError("cache is empty; run forward first")
    n, k = probs.shape
    if k != model.num_classes or cache.z.shape[1] != model.config.embed_dim:
        raise InvalidArgumentError("cache does not match the model")
    y = _check_labels(labels, n, k)
    cfg, p = model.config, model.params
    tau = cache.tau
    protos = model.prototypes

    d_logits = probs.copy()
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    d_sims = d_logits / tau
    grads: dict[str, np.ndarray | float] = {}
    grads["tau"] = float(-np.sum(d_logits * cache.similarities) / tau**2)
    grads["ptilde"] = normalize_vjp(p["ptilde"], d_sims.T @ cache.z)

    d_z = d_sims @ protos
    d_h = normalize_vjp(cache.v, d_z)
    if cfg.residual:
        grads["R"] = d_h.T @ cache.inputs
    for i in reversed(range(cfg.n_layers)):
        d_o = d_h if cache.masks[i] is None else d_h * cache.masks[i]
        d_n = d_o * gelu_grad(cache.normed[i]) if cfg.activation == "gelu" else d_o
        if cfg.layer_norm:
            xhat = cache.xhat[i]
            grads[f"gain{i}"] = np.sum(d_n * xhat, axis=0)
            grads[f"shift{i}"] = np.sum(d_n, axis=0)
            d_xhat = d_n * p[f"gain{i}"]
            d_a = cache.inv_std[i] * (
                d_xhat
                - d_xhat.mean(axis=1, keepdims=True)
                - xhat * (d_xhat * xhat).mean(axis=1, keepdims=True)
            )
        else:
            d_a = d_n
        h_in = cache.layer_inputs[i]
        grads[f"W{i}"] = d_a.T @ h_in
        grads[f"b{i}"] = np.sum(d_a, axis=0)
        d_h = d_a @ p[f"W{i}"]
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient for {name}")
    return {name: grads[name] for name in (*p.keys(), "tau")}


def uncertainty(prototypes, z, tau_unc: float = TAU_UNC) -> np.ndarray | float:
    """``1 - max_k softmax(P z / tau_unc)_k`` for one unit vector or a batch of rows."""
    if tau_unc <= 0:
        raise InvalidArgumentError("tau_unc must be positive")
    z = as_f64(z, "z")
    norms = np.linalg.norm(z, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise InvalidArgumentError("z must have unit norm")
    probs = softmax(z @ as_f64(prototypes, "prototypes").T / tau_unc)
    u = 1.0 - probs.max(axis=-1)
    return float(u) if np.ndim(u) == 0 else u


def misclass_lower_bound(delta: float, tau_unc: float = TAU_UNC) -> float:
    """Uncertainty floor claimed for a misclassified sample with similarity gap ``delta``.

    Evaluates ``1 - 1 / (1 + exp(delta / tau_unc))``. Note this is *not* a valid
    bound: see :func:`misclass_uncertainty_floor` for the one that holds.
    """
    if delta < 0:
        raise InvalidArgumentError("delta must be non-negative")
    if tau_unc <= 0:
        raise InvalidArgumentError("tau_unc must be positive")
    return float(expit(delta / tau_unc))


def misclass_uncertainty_floor(delta: float, tau_unc: float = TAU_UNC) -> float:
    """``1 / (1 + exp(delta / tau_unc))``, a guaranteed floor on ``u`` when misclassified.

    Keeping only the predicted and the true class in the softmax denominator
    caps the top probability at ``1 / (1 + exp(-delta / tau_unc))``.
    """
    if delta < 0:
        raise InvalidArgumentError("delta must be non-negative")
    if tau_unc <= 0:
        raise InvalidArgumentError("tau_unc must be positive")
    return float(expit(-delta / tau_unc))


@dataclass
class PredictiveOutput:
    """Batch predictions; every array has one row per input sample."""

    similarities: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray
    uncertainty: np.ndarray
    embeddings: np.ndarray


def predict(model: VoltaModel, x, tau: float | None = None) -> PredictiveOutput:
    """Deterministic inference: probabilities at the calibrated temperature,
    uncertainty at ``tau_unc``.

    When ``model.mc_passes`` is positive the ablation control runs that many
    dropout-enabled passes and averages both softmax outputs.
    """
    t = model.calibrated_tau if tau is None else float(tau)
    protos = model.prototypes
    if model.mc_passes > 0:
        probs_sum = unc_sum = sims_sum = v_sum = 0.0
        for i in range(model.mc_passes):
            rng = dropout_rng(model.seed, 2, i)
            v = encode(model, x, train=True, rng=rng)
            sims = l2_normalize(v) @ protos.T
            probs_sum = probs_sum + softmax(sims / t)
            unc_sum = unc_sum + softmax(sims / model.tau_unc)
            sims_sum = sims_sum + sims
            v_sum = v_sum + v
        m = model.mc_passes
        probs, unc_probs, sims, v = probs_sum / m, unc_sum / m, sims_sum / m, v_sum / m
    else:
        v = encode(model, x)
        sims = l2_normalize(v) @ protos.T
        probs = softmax(sims / t)
        unc_probs = softmax(sims / model.tau_unc)
    return PredictiveOutput(
        similarities=sims,
        logits=sims / model.tau,
        probabilities=probs,
        labels=np.argmax(probs, axis=1),
        uncertainty=1.0 - unc_probs.max(axis=1),
        embeddings=v,
    )


def save_model(model: VoltaModel, path) -> None:
    """Write a JSON checkpoint; float repr makes the round trip exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in model.params.items()
        },
        "tau": model.tau,
        "tau_star": model.tau_star,
        "tau_unc": model.tau_unc,
        "seed": model.seed,
        "mc_passes": model.mc_passes,
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> VoltaModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f"{path} is not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint version {doc.get('version')}")
    params = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return VoltaModel(
        EncoderConfig.from_dict(doc["config"]),
        params,
        tau=doc["tau"],
        tau_star=doc["tau_star"],
        tau_unc=doc["tau_unc"],
        seed=doc["seed"],
        mc_passes=doc.get("mc_passes", 0),
    )
