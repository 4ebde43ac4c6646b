"""Pluggable fitness problems: validation-set loss plus minibatch gradients.

Fitness is always the mean loss on the fixed validation set; gradients are
always taken on train minibatches. Built-ins: a convex sphere, the multimodal
Rastrigin function, and a small feed-forward softmax classifier on synthetic
Gaussian-mixture data (ReLU on the bottom hidden layers, sigmoid above, a
width-reduced copy of a classic 6-hidden-layer acoustic-model topology).
"""
from __future__ import annotations

import math
import struct
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .core import ConfigError, EncodingError, Shape, as_param_vector, decode, encode, total_size


class NonFiniteFitnessWarning(RuntimeWarning):
    """A raw loss evaluation produced NaN/Inf; reported upward as +inf."""


@dataclass(frozen=True)
class Dataset:
    """Train/validation split of a classification problem.

    Rows are float64 features with integer class labels. Train and validation
    are disjoint draws; the validation half stays fixed for a whole run so
    fitness values are comparable across generations.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    valid_x: np.ndarray
    valid_y: np.ndarray
    seed: int
    n_classes: int

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]

    @property
    def n_valid(self) -> int:
        return self.valid_x.shape[0]

    @property
    def dim_x(self) -> int:
        return self.train_x.shape[1]


def make_synthetic_dataset(
    seed: int, n_train: int, n_valid: int, d_x: int, classes: int
) -> Dataset:
    """Reproducible Gaussian-mixture classification data (same seed, same bits)."""
    if n_train <= 0 or n_valid <= 0 or d_x <= 0 or classes <= 0:
        raise ConfigError("dataset counts and dimensions must be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 2.0, size=(classes, d_x))
    n = n_train + n_valid
    labels = rng.integers(0, classes, size=n)
    x = means[labels] + rng.normal(0.0, 1.0, size=(n, d_x))
    return Dataset(
        train_x=x[:n_train].copy(),
        train_y=labels[:n_train].astype(np.int64),
        valid_x=x[n_train:].copy(),
        valid_y=labels[n_train:].astype(np.int64),
        seed=seed,
        n_classes=classes,
    )


def _degenerate_dataset() -> Dataset:
    """Placeholder dataset for analytic problems; batch indices are ignored."""
    zero_x = np.zeros((1, 1))
    zero_y = np.zeros(1, dtype=np.int64)
    return Dataset(zero_x, zero_y, zero_x.copy(), zero_y.copy(), seed=0, n_classes=1)


class FitnessProblem(ABC):
    """Contract every problem implements; instances are read-only after init.

    Safe to call from many workers at once: evaluation and gradients never
    mutate shared state.
    """

    dataset: Dataset

    @property
    @abstractmethod
    def dimension(self) -> int:
        """Length of the flat parameter vector."""

    @property
    def layer_shapes(self) -> tuple[Shape, ...] | None:
        """Per-layer shape descriptor, when the problem is a network."""
        return None

    @property
    def n_train(self) -> int:
        return self.dataset.n_train

    @abstractmethod
    def evaluate(self, params: np.ndarray) -> float:
        """Mean per-example loss over the full validation set (raw, unguarded)."""

    @abstractmethod
    def train_batch_loss(self, params: np.ndarray, batch: np.ndarray) -> float:
        """Mean loss over the given train rows; what ``gradient`` differentiates."""

    @abstractmethod
    def gradient(self, params: np.ndarray, batch: np.ndarray) -> np.ndarray:
        """Gradient of the mean batch loss w.r.t. the flat parameter vector."""

    @abstractmethod
    def random_params(self, rng: np.random.Generator) -> np.ndarray:
        """Freshly randomized parameters (population diversity comes from here)."""

    def check_dimension(self, params: np.ndarray) -> np.ndarray:
        p = np.asarray(params, dtype=np.float64)
        if p.ndim != 1 or p.size != self.dimension:
            raise EncodingError(
                f"parameter vector has length {p.size}, problem needs {self.dimension}"
            )
        return p

    def check_batch(self, batch) -> np.ndarray:
        idx = np.asarray(batch, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("gradient: empty batch")
        if idx.min() < 0 or idx.max() >= self.n_train:
            raise IndexError("gradient: batch index out of range")
        return idx


def evaluate_fitness(problem: FitnessProblem, params: np.ndarray) -> float:
    """Guarded fitness: validation loss, with non-finite values mapped to +inf."""
    p = problem.check_dimension(params)
    with np.errstate(all="ignore"):
        loss = float(problem.evaluate(p))
    if not math.isfinite(loss):
        warnings.warn(
            f"non-finite fitness ({loss}); reporting +inf", NonFiniteFitnessWarning
        )
        return math.inf
    return loss


# --- analytic benchmark problems ---------------------------------------------


class _AnalyticProblem(FitnessProblem):
    """Closed-form objective; the dataset is degenerate and batches are ignored."""

    def __init__(self, dim: int, init_low: float = -5.12, init_high: float = 5.12):
        if dim <= 0:
            raise ConfigError("problem.dim: must be positive")
        self._dim = int(dim)
        self.init_low = float(init_low)
        self.init_high = float(init_high)
        self.dataset = _degenerate_dataset()

    @property
    def dimension(self) -> int:
        return self._dim

    def value(self, params: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, params: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, params: np.ndarray) -> float:
        return self.value(self.check_dimension(params))

    def train_batch_loss(self, params: np.ndarray, batch) -> float:
        return self.value(self.check_dimension(params))

    def gradient(self, params: np.ndarray, batch) -> np.ndarray:
        self.check_batch(batch)
        return self.grad(self.check_dimension(params))

    def random_params(self, rng: np.random.Generator) -> np.ndarray:
        return as_param_vector(
            rng.uniform(self.init_low, self.init_high, size=self._dim)
        )


class SphereProblem(_AnalyticProblem):
    """f(x) = sum(x_i^2); convex sanity check with minimum 0 at the origin."""

    def value(self, params: np.ndarray) -> float:
        return float(np.dot(params, params))

    def grad(self, params: np.ndarray) -> np.ndarray:
        return 2.0 * params


class RastriginProblem(_AnalyticProblem):
    """f(x) = 10 d + sum(x_i^2 - 10 cos(2 pi x_i)); highly multimodal, min 0 at 0."""

    def value(self, params: np.ndarray) -> float:
        x = params
        return float(10.0 * x.size + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x)))

    def grad(self, params: np.ndarray) -> np.ndarray:
        x = params
        return 2.0 * x + 20.0 * np.pi * np.sin(2.0 * np.pi * x)


# --- feed-forward classifier --------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class MLPClassifierProblem(FitnessProblem):
    """Fully-connected softmax classifier with a ReLU/sigmoid activation split.

    The first ``relu_layers`` hidden layers use ReLU, the remaining hidden
    layers sigmoid, and the output layer is linear into a softmax
    cross-entropy loss. Weights initialize fan-in-scaled uniform, biases zero.
    """

    def __init__(
        self,
        dataset: Dataset,
        hidden: Sequence[int] = (28, 28, 28, 28, 28, 14),
        relu_layers: int = 3,
    ):
        if any(h <= 0 for h in hidden):
            raise ConfigError("problem.hidden: widths must be positive")
        self.dataset = dataset
        self.hidden = tuple(int(h) for h in hidden)
        self.relu_layers = int(relu_layers)
        sizes = [dataset.dim_x, *self.hidden, dataset.n_classes]
        shapes: list[Shape] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes.append((fan_out, fan_in))
            shapes.append((fan_out,))
        self._layer_shapes = tuple(shapes)
        self._dim = total_size(self._layer_shapes)

    @property
    def dimension(self) -> int:
        return self._dim

    @property
    def layer_shapes(self) -> tuple[Shape, ...]:
        return self._layer_shapes

    def random_params(self, rng: np.random.Generator) -> np.ndarray:
        arrays = []
        for shape in self._layer_shapes:
            if len(shape) == 2:
                limit = 1.0 / math.sqrt(shape[1])
                arrays.append(rng.uniform(-limit, limit, size=shape))
            else:
                arrays.append(np.zeros(shape))
        return encode(self._layer_shapes, arrays)

    def _unpack(self, params: np.ndarray):
        arrays = decode(params, self._layer_shapes)
        return arrays[0::2], arrays[1::2]

    def _forward(self, params: np.ndarray, x: np.ndarray):
        weights, biases = self._unpack(params)
        activations = [x]
        pre = []
        a = x
        n_hidden = len(weights) - 1
        for layer in range(n_hidden):
            z = a @ weights[layer].T + biases[layer]
            a = np.maximum(z, 0.0) if layer < self.relu_layers else _sigmoid(z)
            pre.append(z)
            activations.append(a)
        logits = a @ weights[-1].T + biases[-1]
        return weights, pre, activations, logits

    @staticmethod
    def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        total = exp.sum(axis=1, keepdims=True)
        log_probs = shifted - np.log(total)
        loss = float(-log_probs[np.arange(y.size), y].mean())
        probs = exp / total
        return loss, probs

    def _loss(self, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        *_, logits = self._forward(params, x)
        loss, _ = self._cross_entropy(logits, y)
        return loss

    def evaluate(self, params: np.ndarray) -> float:
        p = self.check_dimension(params)
        return self._loss(p, self.dataset.valid_x, self.dataset.valid_y)

    def train_batch_loss(self, params: np.ndarray, batch) -> float:
        idx = self.check_batch(batch)
        p = self.check_dimension(params)
        return self._loss(p, self.dataset.train_x[idx], self.dataset.train_y[idx])

    def gradient(self, params: np.ndarray, batch) -> np.ndarray:
        idx = self.check_batch(batch)
        p = self.check_dimension(params)
        x = self.dataset.train_x[idx]
        y = self.dataset.train_y[idx]
        weights, pre, activations, logits = self._forward(p, x)
        _, probs = self._cross_entropy(logits, y)
        n = y.size
        delta = probs
        delta[np.arange(n), y] -= 1.0
        delta /= n

        grads: list[np.ndarray | None] = [None] * (2 * len(weights))
        grads[-2] = delta.T @ activations[-1]
        grads[-1] = delta.sum(axis=0)
        upstream = delta @ weights[-1]
        for layer in range(len(weights) - 2, -1, -1):
            if layer < self.relu_layers:
                dz = upstream * (pre[layer] > 0.0)
            else:
                a = activations[layer + 1]
                dz = upstream * a * (1.0 - a)
            grads[2 * layer] = dz.T @ activations[layer]
            grads[2 * layer + 1] = dz.sum(axis=0)
            upstream = dz @ weights[layer]
        return encode(self._layer_shapes, grads)


# --- problem registry ----------------------------------------------------------


@dataclass(frozen=True)
class ProblemSpec:
    """Named problem plus its constructor keywords (the config-file surface)."""

    name: str
    params: dict = field(default_factory=dict)


def build_problem(spec: ProblemSpec) -> FitnessProblem:
    name = spec.name.lower().replace("-", "_")
    kwargs = dict(spec.params)
    try:
        if name == "sphere":
            return SphereProblem(
                dim=int(kwargs.pop("dim", 10)),
                init_low=float(kwargs.pop("init_low", -5.12)),
                init_high=float(kwargs.pop("init_high", 5.12)),
                **kwargs,
            )
        if name == "rastrigin":
            return RastriginProblem(
                dim=int(kwargs.pop("dim", 10)),
                init_low=float(kwargs.pop("init_low", -5.12)),
                init_high=float(kwargs.pop("init_high", 5.12)),
                **kwargs,
            )
        if name in ("bn50_tiny", "mlp"):
            dataset = make_synthetic_dataset(
                seed=int(kwargs.pop("seed", 2024)),
                n_train=int(kwargs.pop("n_train", 512)),
                n_valid=int(kwargs.pop("n_valid", 256)),
                d_x=int(kwargs.pop("d_x", 36)),
                classes=int(kwargs.pop("classes", 10)),
            )
            return MLPClassifierProblem(
                dataset,
                hidden=tuple(kwargs.pop("hidden", (28, 28, 28, 28, 28, 14))),
                relu_layers=int(kwargs.pop("relu_layers", 3)),
                **kwargs,
            )
    except TypeError as exc:
        raise ConfigError(f"problem.{name}: {exc}") from exc
    raise ConfigError(f"problem.name: unknown problem {spec.name!r}")


# --- dataset serialization ------------------------------------------------------

_DSET_MAGIC = b"EVODSET1"
_DSET_HEADER = struct.Struct("<QQQQQ")  # seed, n_train, n_valid, d_x, classes


def write_dataset(stream: IO[bytes], ds: Dataset) -> None:
    """Header (seed, counts, dims) then row-major little-endian float64 blocks."""
    stream.write(_DSET_MAGIC)
    stream.write(
        _DSET_HEADER.pack(ds.seed, ds.n_train, ds.n_valid, ds.dim_x, ds.n_classes)
    )
    for arr in (ds.train_x, ds.train_y, ds.valid_x, ds.valid_y):
        stream.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_dataset(stream: IO[bytes]) -> Dataset:
    magic = stream.read(len(_DSET_MAGIC))
    if magic != _DSET_MAGIC:
        raise EncodingError("not a dataset file (bad magic)")
    seed, n_train, n_valid, d_x, classes = _DSET_HEADER.unpack(
        stream.read(_DSET_HEADER.size)
    )

    def block(rows: int, cols: int | None) -> np.ndarray:
        count = rows * (cols or 1)
        data = stream.read(8 * count)
        if len(data) != 8 * count:
            raise EncodingError("truncated dataset file")
        arr = np.frombuffer(data, dtype="<f8").astype(np.float64)
        return arr.reshape(rows, cols) if cols else arr

    train_x = block(n_train, d_x)
    train_y = block(n_train, None).astype(np.int64)
    valid_x = block(n_valid, d_x)
    valid_y = block(n_valid, None).astype(np.int64)
    return Dataset(train_x, train_y, valid_x, valid_y, seed=int(seed), n_classes=int(classes))


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as f:
        write_dataset(f, ds)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        return read_dataset(f)
