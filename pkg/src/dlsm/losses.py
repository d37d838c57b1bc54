"""Noise schedule, score-matching objectives and the two-stage training drivers.

Two forms of each objective exist.  Called with ``weights=None`` a loss is the
plain half-squared-error form at whatever noise levels the batch carries;
called with a :class:`LossWeights` it becomes the noise-averaged training form,
``mean(lambda(sigma_t) * ||residual||^2)`` without the 1/2.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import LabeledDataset
from .models import (
    MlpSpec,
    ModelParams,
    classifier_input_grad,
    classifier_log_prob,
    init,
    picked_log_prob_and_input_grad,
    score_forward,
)
from .oracle import ParzenOracle

log = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "dlsm", "total")


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, message: str):
        super().__init__(f"non-finite loss at iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    T: int = 1000

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    def sigma_at(self, t):
        """sigma_min * (sigma_max / sigma_min) ** (t / T) for t in [0, T]."""
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any((t_arr < 0) | (t_arr > self.T)):
            raise ValueError(f"t must lie in [0, {self.T}]")
        out = self.sigma_min * (self.sigma_max / self.sigma_min) ** (t_arr / self.T)
        return float(out) if out.ndim == 0 else out

    def sample_sigma(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.sigma_at(rng.uniform(0.0, self.T, size=n))


@dataclass(frozen=True)
class LossWeights:
    """Per-noise-level weights ``lambda(sigma) = sigma ** -power``."""

    dsm_power: float = 4.0
    dlsm_power: float = 4.0
    ce_weight: float = 1.0
    balance: float = 0.125

    def lambda_dsm(self, sigma):
        return np.asarray(sigma, dtype=np.float64) ** -self.dsm_power

    def lambda_dlsm(self, sigma):
        return np.asarray(sigma, dtype=np.float64) ** -self.dlsm_power

    def lambda_ce(self, sigma):
        return np.full(np.shape(sigma), self.ce_weight, dtype=np.float64)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 40000
    batch_size: int = 4000
    learning_rate: float = 6.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("iterations, batch_size and learning_rate must be non-negative")


@dataclass
class NoisyBatch:
    x: np.ndarray
    x_tilde: np.ndarray
    labels: np.ndarray
    sigma: np.ndarray

    @property
    def target(self) -> np.ndarray:
        """Denoising score (x - x_tilde) / sigma^2 for every sample."""
        return (self.x - self.x_tilde) / self.sigma[:, None] ** 2

    def __len__(self) -> int:
        return len(self.x)


def perturb(x, sigma, rng: np.random.Generator):
    """Return ``(x_tilde, target)`` with x_tilde = x + sigma z and target = -z / sigma."""
    x = np.asarray(x, dtype=np.float64)
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sig > 0)):
        raise ValueError("sigma must be positive")
    z = rng.standard_normal(x.shape)
    s = sig[..., None] if sig.ndim and x.ndim > 1 else sig
    x_tilde = x + s * z
    return x_tilde, -z / s


def draw_batch(
    dataset: LabeledDataset,
    schedule: NoiseSchedule,
    batch_size: int,
    rng: np.random.Generator,
) -> NoisyBatch:
    """Sample pairs with replacement, a continuous t per sample, and perturb."""
    idx = rng.integers(0, len(dataset), size=batch_size)
    sigma = schedule.sample_sigma(rng, batch_size)
    x = dataset.points[idx]
    x_tilde, _ = perturb(x, sigma, rng)
    return NoisyBatch(x=x, x_tilde=x_tilde, labels=dataset.labels[idx], sigma=sigma)


def _reduce(residual: Tensor, sigma: np.ndarray, weight_fn) -> Tensor:
    per_sample = ad.sqnorm(residual, axis=1)
    if weight_fn is None:
        return ad.scale(ad.mean(per_sample), 0.5)
    return ad.mean(ad.mul(per_sample, Tensor(weight_fn(sigma))))


def _frozen_score(score_params, x_tilde, sigma) -> np.ndarray:
    with ad.no_grad():
        return score_forward(score_params, x_tilde, sigma).data


# ---------------------------------------------------------------------------
# prior score objectives


def dsm_loss(score_params, batch: NoisyBatch, weights: LossWeights | None = None) -> Tensor:
    s = score_forward(score_params, batch.x_tilde, batch.sigma)
    resid = ad.sub(s, Tensor(batch.target))
    return _reduce(resid, batch.sigma, None if weights is None else weights.lambda_dsm)


def esm_loss(score_params, oracle: ParzenOracle, x_tilde, sigma: float) -> Tensor:
    """Mean of 1/2 ||s(x_tilde) - true prior score||^2 at a single noise level."""
    x_tilde = np.atleast_2d(np.asarray(x_tilde, dtype=np.float64))
    o = oracle.with_sigma(sigma) if oracle.sigma != sigma else oracle
    s = score_forward(score_params, x_tilde, sigma)
    resid = ad.sub(s, Tensor(o.prior_score(x_tilde)))
    return _reduce(resid, np.full(len(x_tilde), sigma), None)


# ---------------------------------------------------------------------------
# classifier objectives


def _picked_log_prob(clf_params, x, labels, sigma) -> Tensor:
    logp = classifier_log_prob(clf_params, x, sigma)
    return ad.gather(logp, (np.arange(len(labels)), np.asarray(labels)))


def ce_loss(clf_params, batch: NoisyBatch, weights: LossWeights | None = None) -> Tensor:
    picked = _picked_log_prob(clf_params, batch.x_tilde, batch.labels, batch.sigma)
    if weights is None:
        return ad.neg(ad.mean(picked))
    return ad.neg(ad.mean(ad.mul(picked, Tensor(weights.lambda_ce(batch.sigma)))))


def _oracle_rows(oracle: ParzenOracle, batch: NoisyBatch, fn) -> np.ndarray:
    out = np.empty_like(batch.x_tilde)
    for sig in np.unique(batch.sigma):
        rows = batch.sigma == sig
        o = oracle if oracle.sigma == sig else oracle.with_sigma(float(sig))
        out[rows] = fn(o, batch.x_tilde[rows], batch.labels[rows])
    return out


def _per_label(method):
    def fn(o, x, labels):
        res = np.empty_like(x)
        for c in np.unique(labels):
            res[labels == c] = method(o, x[labels == c], int(c))
        return res

    return fn


def oracle_prior_scores(oracle: ParzenOracle, batch: NoisyBatch) -> np.ndarray:
    return _oracle_rows(oracle, batch, lambda o, x, _: o.prior_score(x))


def oracle_posterior_scores(oracle: ParzenOracle, batch: NoisyBatch) -> np.ndarray:
    return _oracle_rows(oracle, batch, _per_label(ParzenOracle.posterior_score))


def oracle_likelihood_scores(oracle: ParzenOracle, batch: NoisyBatch) -> np.ndarray:
    return _oracle_rows(oracle, batch, _per_label(ParzenOracle.likelihood_score))


def _likelihood_residual(g: Tensor, batch: NoisyBatch, prior: np.ndarray, target=None) -> Tensor:
    tgt = batch.target if target is None else np.asarray(target)
    return ad.add(g, Tensor(prior - tgt))


def _input_grad(clf_params, batch: NoisyBatch) -> Tensor:
    return classifier_input_grad(
        clf_params, batch.x_tilde, batch.labels, batch.sigma, create_graph=True
    )


def dlsm_prime_loss(
    clf_params,
    frozen_score,
    batch: NoisyBatch,
    weights: LossWeights | None = None,
) -> Tensor:
    """||grad_x log p(y|x_tilde) + s(x_tilde) - (x - x_tilde)/sigma^2||^2 averaged.

    The score model is evaluated without recording; no gradient reaches it.
    """
    prior = _frozen_score(frozen_score, batch.x_tilde, batch.sigma)
    resid = _likelihood_residual(_input_grad(clf_params, batch), batch, prior)
    return _reduce(resid, batch.sigma, None if weights is None else weights.lambda_dlsm)


def dlsm_loss_oracle(
    clf_params,
    oracle: ParzenOracle,
    batch: NoisyBatch,
    weights: LossWeights | None = None,
    target=None,
) -> Tensor:
    """DLSM with the exact Parzen prior score in place of the score model.

    ``target`` replaces the per-sample denoising target when given; passing the
    exact posterior score gives the conditional-mean (Rao-Blackwellized) loss.
    """
    prior = oracle_prior_scores(oracle, batch)
    resid = _likelihood_residual(_input_grad(clf_params, batch), batch, prior, target)
    return _reduce(resid, batch.sigma, None if weights is None else weights.lambda_dlsm)


def elsm_loss(clf_params, oracle: ParzenOracle, batch: NoisyBatch) -> Tensor:
    """Mean of 1/2 ||grad_x log p(y|x_tilde) - true likelihood score||^2."""
    resid = ad.sub(_input_grad(clf_params, batch), Tensor(oracle_likelihood_scores(oracle, batch)))
    return _reduce(resid, batch.sigma, None)


def total_loss(
    clf_params,
    frozen_score,
    batch: NoisyBatch,
    weights: LossWeights,
    balance: float | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """``dlsm' + balance * ce``; returns (total, dlsm', ce).

    Both terms come from a single classifier forward pass.
    """
    lam = weights.balance if balance is None else balance
    picked, g = picked_log_prob_and_input_grad(
        clf_params, batch.x_tilde, batch.labels, batch.sigma, create_graph=True
    )
    prior = _frozen_score(frozen_score, batch.x_tilde, batch.sigma)
    dl = _reduce(_likelihood_residual(g, batch, prior), batch.sigma, weights.lambda_dlsm)
    ce = ad.neg(ad.mean(ad.mul(picked, Tensor(weights.lambda_ce(batch.sigma)))))
    return ad.add(dl, ad.scale(ce, lam)), dl, ce


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            step = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            out.append(p - step)
        return out


@dataclass
class LossTrace:
    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    ce: list[float] = field(default_factory=list)
    dlsm: list[float] = field(default_factory=list)

    def record(self, it: int, loss: float, ce: float = math.nan, dlsm: float = math.nan):
        self.iteration.append(it)
        self.loss.append(loss)
        self.ce.append(ce)
        self.dlsm.append(dlsm)

    def __len__(self) -> int:
        return len(self.iteration)

    def rows(self):
        return list(zip(self.iteration, self.loss, self.ce, self.dlsm))


Callback = Callable[[int, ModelParams], None]


def _run(params, cfg: TrainConfig, step_fn, trace: LossTrace, callback, callback_every):
    opt = Adam(params.arrays(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    params.meta.update(
        optimizer={"name": "adam", "lr": cfg.learning_rate, "beta1": cfg.beta1,
                   "beta2": cfg.beta2, "eps": cfg.eps},
        train_config=asdict(cfg),
    )
    if callback is not None:
        callback(0, params)
    for it in range(1, cfg.iterations + 1):
        leaves = params.tensors(requires_grad=True)
        loss, ce, dl = step_fn(leaves)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(
                it, f"loss={value}, ce={_val(ce)}, dlsm={_val(dl)}, "
                f"max|param|={max(float(np.max(np.abs(a))) for a in params.arrays()):.3g}"
            )
        grads = ad.grad(loss, leaves)
        params.set_arrays(opt.step(params.arrays(), [g.data for g in grads]))
        trace.record(it, value, _val(ce), _val(dl))
        params.meta["iterations"] = params.meta.get("iterations", 0) + 1
        if callback is not None and callback_every and it % callback_every == 0:
            callback(it, params)
    return params


def _val(t) -> float:
    return math.nan if t is None else t.item()


def train_score_model(
    dataset: LabeledDataset,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    spec: MlpSpec | None = None,
    callback: Callback | None = None,
    callback_every: int = 0,
) -> tuple[ModelParams, LossTrace]:
    """Stage 1: fit s(x_tilde; phi, sigma_t) by weighted denoising score matching."""
    spec = spec or MlpSpec.score_model(dataset.dim, seed=cfg.seed)
    params = init(spec)
    params.meta["loss_kind"] = "dsm"
    rng = np.random.default_rng(cfg.seed)
    trace = LossTrace()

    def step(leaves):
        batch = draw_batch(dataset, schedule, cfg.batch_size, rng)
        return dsm_loss(leaves, batch, weights), None, None

    _run(params, cfg, step, trace, callback, callback_every)
    return params, trace


def train_classifier(
    dataset: LabeledDataset,
    frozen_score: ModelParams | None,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    loss_kind: str = "total",
    spec: MlpSpec | None = None,
    callback: Callback | None = None,
    callback_every: int = 0,
) -> tuple[ModelParams, LossTrace]:
    """Stage 2: fit p(y | x_tilde; theta, sigma_t) with CE, DLSM' or their sum."""
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
    if loss_kind != "ce" and frozen_score is None:
        raise ValueError(f"loss_kind {loss_kind!r} needs a trained score model")
    spec = spec or MlpSpec.classifier(dataset.dim, dataset.class_count, seed=cfg.seed)
    params = init(spec)
    params.meta["loss_kind"] = loss_kind
    rng = np.random.default_rng(cfg.seed)
    trace = LossTrace()
    score_layers = frozen_score.tensors() if frozen_score is not None else None

    def step(leaves):
        batch = draw_batch(dataset, schedule, cfg.batch_size, rng)
        if loss_kind == "ce":
            ce = ce_loss(leaves, batch, weights)
            return ce, ce, None
        if loss_kind == "dlsm":
            dl = dlsm_prime_loss(leaves, score_layers, batch, weights)
            return dl, None, dl
        return total_loss(leaves, score_layers, batch, weights)

    _run(params, cfg, step, trace, callback, callback_every)
    return params, trace
