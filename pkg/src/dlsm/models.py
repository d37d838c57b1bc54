"""Noise-conditioned MLPs used as the prior score model and the classifier.

Both networks see ``concat(x_tilde, ln sigma)`` and use ReLU hidden layers.
The score model's raw output is the score estimate; the classifier's output
is a vector of logits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"DLSM"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (128, 64, 32)
    kind: str = "score"
    activation: str = "relu"
    sigma_conditioning: str = "append-log-sigma"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ValueError("hidden must be non-empty")
        if min((self.input_dim, self.output_dim, *self.hidden)) < 1:
            raise ValueError("layer widths must be >= 1")
        if self.kind not in ("score", "classifier"):
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def data_dim(self) -> int:
        return self.input_dim - 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @classmethod
    def score_model(cls, d: int, hidden=(128, 64, 32), seed: int = 0) -> MlpSpec:
        return cls(input_dim=d + 1, output_dim=d, hidden=hidden, kind="score", seed=seed)

    @classmethod
    def classifier(cls, d: int, class_count: int, hidden=(128, 64, 32), seed: int = 0) -> MlpSpec:
        return cls(
            input_dim=d + 1, output_dim=class_count, hidden=hidden, kind="classifier", seed=seed
        )


@dataclass
class ModelParams:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> ModelParams:
        return ModelParams(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            json.loads(json.dumps(self.meta)),
        )

    def set_arrays(self, arrays: list[np.ndarray]) -> None:
        self.weights = [np.asarray(a, dtype=np.float64) for a in arrays[0::2]]
        self.biases = [np.asarray(a, dtype=np.float64) for a in arrays[1::2]]

    def tensors(self, requires_grad: bool = False) -> list[Tensor]:
        return [Tensor(a, requires_grad=requires_grad) for a in self.arrays()]


def init(spec: MlpSpec) -> ModelParams:
    """He-uniform weights (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_shapes():
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(spec, weights, biases, {"iterations": 0})


def _sigma_column(sigma, n: int) -> np.ndarray:
    s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    if np.any(~(s > 0)):
        raise ValueError("sigma_t must be positive")
    return np.log(s)[:, None]


def _check_input(x) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    if not np.all(np.isfinite(x.data)):
        raise ValueError("non-finite model input")
    return x


def mlp_forward(layers: list[Tensor], x, sigma) -> Tensor:
    """Apply the MLP given as ``[W1, b1, W2, b2, ...]`` to ``concat(x, ln sigma)``."""
    x = _check_input(x)
    h = ad.concat([x, Tensor(_sigma_column(sigma, x.shape[0]))], axis=1)
    n_layers = len(layers) // 2
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, layers[2 * i]), layers[2 * i + 1])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def _layers(params) -> list[Tensor]:
    if isinstance(params, ModelParams):
        return params.tensors()
    return list(params)


def score_forward(params, x_tilde, sigma_t) -> Tensor:
    """Score estimate s(x_tilde; phi, sigma_t), shape (B, d)."""
    return mlp_forward(_layers(params), x_tilde, sigma_t)


def classifier_log_prob(params, x_tilde, sigma_t) -> Tensor:
    """Per-class log-probabilities, shape (B, class_count)."""
    return ad.log_softmax(mlp_forward(_layers(params), x_tilde, sigma_t), axis=1)


def classifier_input_grad(
    params, x_tilde, labels, sigma_t, create_graph: bool = False
) -> Tensor:
    """Gradient of log p(label | x_tilde) with respect to x_tilde, shape (B, d).

    With ``create_graph=True`` the result stays differentiable with respect to
    the classifier parameters.  The ln-sigma input coordinate is a constant.
    """
    return picked_log_prob_and_input_grad(params, x_tilde, labels, sigma_t, create_graph)[1]


def picked_log_prob_and_input_grad(
    params, x_tilde, labels, sigma_t, create_graph: bool = False
) -> tuple[Tensor, Tensor]:
    """Per-sample log p(label | x_tilde), shape (B,), and its x_tilde-gradient.

    One forward pass serves both, which is what the combined objective needs.
    """
    if isinstance(x_tilde, Tensor) and x_tilde.requires_grad and x_tilde.is_leaf:
        x = x_tilde
    else:
        data = ad.as_tensor(x_tilde).data
        x = Tensor(data.reshape(1, -1) if data.ndim == 1 else data, requires_grad=True)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (x.shape[0],))
    layers = _layers(params)
    n_out = layers[-1].shape[0]
    if labels.min() < 0 or labels.max() >= n_out:
        raise ValueError(f"class label out of range [0, {n_out})")
    with ad.enable_grad():
        logp = classifier_log_prob(layers, x, sigma_t)
        picked = ad.gather(logp, (np.arange(x.shape[0]), labels))
        total = ad.tsum(picked)
    (g,) = ad.grad(total, [x], create_graph=create_graph)
    return picked, g


# ---------------------------------------------------------------------------
# checkpoints


def _header(params: ModelParams) -> bytes:
    doc = {"spec": asdict(params.spec), "meta": params.meta}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(params: ModelParams, path) -> None:
    header = _header(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path, expected: MlpSpec | None = None) -> ModelParams:
    """Read a checkpoint; ``expected`` guards against loading the wrong model type."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a DLSM checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    try:
        doc = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
        spec = MlpSpec(**doc["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header ({exc})") from None
    if expected is not None and (
        spec.layer_shapes() != expected.layer_shapes() or spec.kind != expected.kind
    ):
        raise CheckpointShapeError(
            f"{path}: holds a {spec.kind} with layers {spec.layer_shapes()}, "
            f"expected a {expected.kind} with layers {expected.layer_shapes()}"
        )
    arrays = []
    offset = 12 + hlen
    for fan_in, fan_out in spec.layer_shapes():
        for shape in ((fan_in, fan_out), (fan_out,)):
            nbytes = 8 * int(np.prod(shape))
            chunk = raw[offset : offset + nbytes]
            if len(chunk) != nbytes:
                raise CheckpointCorruptError(f"{path}: truncated parameter block")
            arrays.append(np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape))
            offset += nbytes
    if offset != len(raw):
        raise CheckpointCorruptError(f"{path}: {len(raw) - offset} trailing bytes")
    params = ModelParams(spec, [], [], doc.get("meta", {}))
    params.set_arrays(arrays)
    return params
