"""Shared test helpers."""

import numpy as np

from dlsm import autodiff as ad
from dlsm.models import MlpSpec, init

SMALL_HIDDEN = (8, 6, 4)

# criterion number -> (passed, title, detail); printed by conftest.py
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def unpack(flat: ad.Tensor, shapes):
    """Split a flat parameter tensor into ``[W1, b1, ...]`` graph nodes."""
    out, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(ad.reshape(flat[pos : pos + n], shape))
        pos += n
    return out


def param_shapes(params):
    return [a.shape for a in params.arrays()]


def flat_params(params):
    return np.concatenate([a.reshape(-1) for a in params.arrays()])


def min_preactivation(params, x, sigma) -> float:
    """Smallest |pre-activation| over hidden units; used to avoid relu kinks."""
    x = np.atleast_2d(x)
    log_sigma = np.log(np.broadcast_to(sigma, (len(x),)))[:, None]
    h = np.concatenate([x, log_sigma], axis=1)
    best = np.inf
    for w, b in list(zip(params.weights, params.biases))[:-1]:
        z = h @ w + b
        best = min(best, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0)
    return best


def small_classifier(seed=0, classes=2, d=2):
    return init(MlpSpec.classifier(d, classes, hidden=SMALL_HIDDEN, seed=seed))


def small_score(seed=0, d=2):
    return init(MlpSpec.score_model(d, hidden=SMALL_HIDDEN, seed=seed))


# ---------------------------------------------------------------------------
# random instances for the per-op finite-difference sweep
#
# Each case maps an rng to (x0, f) where f is a scalar function of one tensor.
# Binary ops appear twice so both operand slots are exercised.  A fixed random
# cotangent turns vector outputs into scalars without hiding any component.


def _contract(out: ad.Tensor, rng_seed: int) -> ad.Tensor:
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return ad.tsum(ad.mul(out, ad.Tensor(w)))


def _away_from_zero(rng, shape, gap=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, gap * np.sign(x + 0.5), x)


def _binary(op, first: bool, shape_a, shape_b):
    def case(rng):
        a = rng.standard_normal(shape_a)
        b = rng.standard_normal(shape_b)
        seed = int(rng.integers(1 << 31))
        if first:
            return a, lambda x: _contract(op(x, ad.Tensor(b)), seed)
        return b, lambda x: _contract(op(ad.Tensor(a), x), seed)

    return case


def _unary(op, sample=None, shape=(3, 4)):
    def case(rng):
        x = rng.standard_normal(shape) if sample is None else sample(rng, shape)
        seed = int(rng.integers(1 << 31))
        return x, lambda t: _contract(op(t), seed)

    return case


def _rows(rng):
    return rng.integers(0, 3, size=4)


def _gather_case(rng):
    x = rng.standard_normal((4, 3))
    rows = np.arange(4)
    cols = _rows(rng)
    seed = int(rng.integers(1 << 31))
    return x, lambda t: _contract(ad.gather(t, (rows, cols)), seed)


def _concat_case(first: bool):
    def case(rng):
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal((3, 4))
        seed = int(rng.integers(1 << 31))
        if first:
            return a, lambda t: _contract(ad.concat([t, ad.Tensor(b)], axis=1), seed)
        return b, lambda t: _contract(ad.concat([ad.Tensor(a), t], axis=1), seed)

    return case


OP_CASES = {
    "add": _binary(ad.add, True, (3, 4), (3, 4)),
    "add_bias": _binary(ad.add, False, (3, 4), (4,)),
    "sub_lhs": _binary(ad.sub, True, (3, 4), (3, 4)),
    "sub_rhs": _binary(ad.sub, False, (3, 4), (4,)),
    "mul_lhs": _binary(ad.mul, True, (3, 4), (3, 4)),
    "mul_rhs": _binary(ad.mul, False, (3, 4), (3, 4)),
    "matmul_lhs": _binary(ad.matmul, True, (3, 4), (4, 2)),
    "matmul_rhs": _binary(ad.matmul, False, (3, 4), (4, 2)),
    "scale": _unary(lambda t: ad.scale(t, -2.5)),
    "neg": _unary(ad.neg),
    "relu": _unary(ad.relu, _away_from_zero),
    "softplus": _unary(ad.softplus),
    "sigmoid": _unary(ad.sigmoid),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, lambda rng, s: rng.uniform(0.5, 3.0, s)),
    "reciprocal": _unary(ad.reciprocal, lambda rng, s: rng.uniform(0.5, 3.0, s)),
    "sum": _unary(lambda t: ad.tsum(t)),
    "sum_axis": _unary(lambda t: ad.tsum(t, axis=0)),
    "mean": _unary(lambda t: ad.mean(t, axis=1)),
    "sqnorm": _unary(lambda t: ad.sqnorm(t, axis=1)),
    "log_softmax": _unary(lambda t: ad.log_softmax(t, axis=1)),
    "logsumexp": _unary(lambda t: ad.logsumexp(t, axis=1)),
    "gather": _gather_case,
    "concat_first": _concat_case(True),
    "concat_second": _concat_case(False),
    "transpose": _unary(ad.transpose),
    "reshape": _unary(lambda t: ad.reshape(t, (2, 6))),
    "broadcast_to": _unary(lambda t: ad.broadcast_to(t, (5, 4)), shape=(4,)),
}


# ---------------------------------------------------------------------------
# composite-loss instances (flattened parameters, kink-free batches)


def _kink_free_batch(params, rng, schedule, batch_size=6, gap=1e-3, tries=50):
    from dlsm.losses import NoisyBatch, perturb

    for _ in range(tries):
        x = 3.0 * rng.standard_normal((batch_size, 2))
        sigma = schedule.sample_sigma(rng, batch_size)
        x_tilde, _ = perturb(x, sigma, rng)
        if min_preactivation(params, x_tilde, sigma) > gap:
            return NoisyBatch(x, x_tilde, rng.integers(0, 2, size=batch_size), sigma)
    raise RuntimeError("could not draw a batch away from relu kinks")


def dsm_case(rng, schedule, weights):
    from dlsm.losses import dsm_loss

    params = small_score(seed=int(rng.integers(1 << 31)))
    batch = _kink_free_batch(params, rng, schedule)
    shapes = param_shapes(params)
    return flat_params(params), lambda t: dsm_loss(unpack(t, shapes), batch, weights)


def dlsm_prime_case(rng, schedule, weights):
    from dlsm.losses import dlsm_prime_loss

    clf = small_classifier(seed=int(rng.integers(1 << 31)))
    score = small_score(seed=int(rng.integers(1 << 31)))
    batch = _kink_free_batch(clf, rng, schedule)
    shapes = param_shapes(clf)
    return flat_params(clf), lambda t: dlsm_prime_loss(unpack(t, shapes), score, batch, weights)


# ---------------------------------------------------------------------------
# conditional-mean substitution: DLSM with the exact target vs ELSM


def theorem_setup(seed=0, pairs=20):
    """10-point 2-class dataset, random classifier, random (x_tilde, y, sigma)."""
    from dlsm.datasets import LabeledDataset
    from dlsm.losses import NoisyBatch
    from dlsm.oracle import ParzenOracle

    rng = np.random.default_rng(seed)
    ds = LabeledDataset(2.0 * rng.standard_normal((10, 2)), np.repeat([0, 1], 5), 2)
    clf = small_classifier(seed=seed)
    idx = rng.integers(0, 10, size=pairs)
    sigma = np.exp(rng.uniform(np.log(0.3), np.log(3.0), size=pairs))
    x_tilde = ds.points[idx] + sigma[:, None] * rng.standard_normal((pairs, 2))
    batch = NoisyBatch(ds.points[idx], x_tilde, ds.labels[idx], sigma)
    return ds, ParzenOracle(ds, 1.0), clf, batch


def param_grad(loss_fn, clf):
    leaves = clf.tensors(requires_grad=True)
    return np.concatenate([g.data.reshape(-1) for g in ad.grad(loss_fn(leaves), leaves)])


def resample_clean(ds, batch, n, rng):
    """n draws of x ~ p(x | x_tilde, y) for every pair, by posterior kernel weights."""
    xs = np.empty((len(batch), n, ds.dim))
    for j, (xt, y, s) in enumerate(zip(batch.x_tilde, batch.labels, batch.sigma)):
        pts = ds.points[ds.labels == y]
        logw = -np.sum((pts - xt) ** 2, axis=1) / (2 * s**2)
        w = np.exp(logw - logw.max())
        xs[j] = pts[rng.choice(len(pts), size=n, p=w / w.sum())]
    return xs
