"""Score-error metrics on a grid, k-NN precision/recall/density/coverage,
and the training-time ablation recorder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .losses import NoiseSchedule
from .models import ModelParams, classifier_input_grad, classifier_log_prob
from .oracle import ParzenOracle

FieldFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class ScoreField:
    grid_points: np.ndarray
    vectors: np.ndarray
    sigma: float
    label: int | None
    kind: str

    def __post_init__(self):
        if self.grid_points.shape != self.vectors.shape:
            raise ValueError("grid points and vectors must have the same shape")
        if self.kind not in ("posterior", "likelihood", "prior"):
            raise ValueError(f"unknown field kind {self.kind!r}")


@dataclass
class MetricsReport:
    exp_dp: dict[int, float] = field(default_factory=dict)
    exp_dl: dict[int, float] = field(default_factory=dict)
    precision: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)
    density: dict[int, float] = field(default_factory=dict)
    coverage: dict[int, float] = field(default_factory=dict)
    k: int = 3

    def to_dict(self) -> dict:
        return {key: ({str(c): v for c, v in val.items()} if isinstance(val, dict) else val)
                for key, val in asdict(self).items()}


def uniform_grid(bounds: Sequence[tuple[float, float]], count: int, mode: str = "lattice",
                 seed: int = 0) -> np.ndarray:
    """Evaluation points over a box: a regular lattice or seeded uniform draws.

    In lattice mode ``count`` must be a perfect d-th power (35 x 35 = 1225).
    """
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    for lo, hi in bounds:
        if not lo < hi:
            raise ValueError(f"invalid bounds ({lo}, {hi})")
    d = len(bounds)
    if mode == "random":
        rng = np.random.default_rng(seed)
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        return lo + (hi - lo) * rng.uniform(size=(count, d))
    if mode != "lattice":
        raise ValueError(f"unknown grid mode {mode!r}")
    side = round(count ** (1.0 / d))
    if side**d != count:
        raise ValueError(f"lattice grid needs a perfect {d}-th power count, got {count}")
    axes = [np.linspace(lo, hi, side) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def score_error_expectation(estimated: FieldFn, oracle: FieldFn, grid: np.ndarray,
                            label: int) -> float:
    """Mean over the grid of ||estimated(x, label) - oracle(x, label)||."""
    diff = np.asarray(estimated(grid, label)) - np.asarray(oracle(grid, label))
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def _kth_radii(points: np.ndarray, k: int) -> np.ndarray:
    d = cdist(points, points)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def prdc(real, generated, k: int = 3) -> dict[str, float]:
    """Precision, recall, density and coverage with k-NN balls (``<=`` on ties)."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(generated, dtype=np.float64)
    if len(real) <= k or len(fake) <= k:
        raise ValueError(f"need more than k={k} points in each set")
    for name, pts in (("real", real), ("generated", fake)):
        if np.all(pts == pts[0]):
            raise ValueError(f"degenerate {name} set: all points identical")
    real_r = _kth_radii(real, k)
    fake_r = _kth_radii(fake, k)
    dist = cdist(real, fake)
    inside_real = dist <= real_r[:, None]
    return {
        "precision": float(inside_real.any(axis=0).mean()),
        "recall": float((dist <= fake_r[None, :]).any(axis=1).mean()),
        "density": float(inside_real.sum() / (k * len(fake))),
        "coverage": float(inside_real.any(axis=1).mean()),
    }


# ---------------------------------------------------------------------------
# field helpers


def classifier_likelihood_field(clf: ModelParams, sigma: float, weight: float = 1.0) -> FieldFn:
    def fn(x, label):
        return weight * classifier_input_grad(clf, x, label, sigma).data

    return fn


def oracle_field(oracle: ParzenOracle, kind: str) -> FieldFn:
    if kind == "posterior":
        return lambda x, label: oracle.posterior_score(x, label)
    if kind == "likelihood":
        return lambda x, label: oracle.likelihood_score(x, label)
    if kind == "prior":
        return lambda x, label: oracle.prior_score(x)
    raise ValueError(f"unknown field kind {kind!r}")


def make_field(fn: FieldFn, grid: np.ndarray, sigma: float, label: int, kind: str) -> ScoreField:
    return ScoreField(grid, np.asarray(fn(grid, label)), sigma, label, kind)


# ---------------------------------------------------------------------------
# training-time ablation


@dataclass
class AblationTrace:
    iteration: list[int] = field(default_factory=list)
    score_error: list[float] = field(default_factory=list)
    cross_entropy: list[float] = field(default_factory=list)

    def at_fraction(self, frac: float) -> int:
        """Index of the record closest to ``frac`` of the final iteration."""
        its = np.asarray(self.iteration)
        return int(np.argmin(np.abs(its - frac * its[-1])))


class AblationRecorder:
    """Training callback recording likelihood-score error and cross-entropy.

    The score error is the class-averaged mean ||grad_x log p(y|x) - true
    likelihood score|| over the grid; the cross-entropy is measured on a
    fixed perturbed evaluation set.
    """

    def __init__(self, oracle: ParzenOracle, grid: np.ndarray, eval_x: np.ndarray,
                 eval_y: np.ndarray, eval_sigma: np.ndarray):
        self.oracle = oracle
        self.grid = grid
        self.eval_x, self.eval_y, self.eval_sigma = eval_x, eval_y, eval_sigma
        self.trace = AblationTrace()
        self._targets = {c: oracle.likelihood_score(grid, c)
                         for c in range(oracle.dataset.class_count)}

    @classmethod
    def from_dataset(cls, oracle: ParzenOracle, grid: np.ndarray, schedule: NoiseSchedule,
                     n_eval: int = 2000, seed: int = 12345) -> AblationRecorder:
        from .losses import draw_batch

        batch = draw_batch(oracle.dataset, schedule, n_eval, np.random.default_rng(seed))
        return cls(oracle, grid, batch.x_tilde, batch.labels, batch.sigma)

    def __call__(self, iteration: int, params: ModelParams) -> None:
        errs = []
        for c, target in self._targets.items():
            est = classifier_input_grad(params, self.grid, c, self.oracle.sigma).data
            errs.append(float(np.mean(np.linalg.norm(est - target, axis=1))))
        with ad.no_grad():
            logp = classifier_log_prob(params, self.eval_x, self.eval_sigma).data
        ce = float(-np.mean(logp[np.arange(len(self.eval_y)), self.eval_y]))
        self.trace.iteration.append(iteration)
        self.trace.score_error.append(float(np.mean(errs)))
        self.trace.cross_entropy.append(ce)


def aggregate_traces(traces: Sequence[AblationTrace], attr: str) -> dict[str, np.ndarray]:
    """Mean and 95% t-interval half-width across seeds, per recorded iteration."""
    values = np.array([getattr(t, attr) for t in traces], dtype=np.float64)
    n = len(values)
    mean = values.mean(axis=0)
    if n > 1:
        half = stats.t.ppf(0.975, n - 1) * values.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        half = np.zeros_like(mean)
    return {"iteration": np.asarray(traces[0].iteration), "mean": mean,
            "lo": mean - half, "hi": mean + half}
