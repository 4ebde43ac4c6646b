"""Flat parameter vectors, individuals, populations, and fitness ranking.

Model weights are carried around as a single read-only float64 vector (the
genotype). ``encode``/``decode`` translate between that vector and a list of
per-layer arrays; ``rank`` orders individuals by fitness with deterministic
tie-breaking. Everything here is an immutable value object so individuals can
be shared freely across worker threads.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence, TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .optimizers import OptimizerConfig, OptimizerState

Shape = tuple[int, ...]


class ConfigError(ValueError):
    """A configuration value violates its contract; message names the field."""


class EncodingError(ValueError):
    """Arrays do not conform to the given shape descriptor."""


def as_param_vector(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return a fresh, contiguous, read-only float64 vector."""
    vec = np.array(values, dtype=np.float64, copy=True, order="C")
    if vec.ndim != 1:
        raise EncodingError(f"parameter vector must be 1-d, got shape {vec.shape}")
    if vec.size == 0:
        raise EncodingError("parameter vector must have dimension > 0")
    vec.setflags(write=False)
    return vec


def total_size(layer_shapes: Sequence[Shape]) -> int:
    return int(sum(int(np.prod(s, dtype=np.int64)) for s in layer_shapes))


def encode(layer_shapes: Sequence[Shape], arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Flatten per-layer arrays into one vector (layer-major, row-major within)."""
    if len(arrays) != len(layer_shapes):
        raise EncodingError(
            f"expected {len(layer_shapes)} arrays, got {len(arrays)}"
        )
    parts = []
    for i, (shape, arr) in enumerate(zip(layer_shapes, arrays)):
        a = np.asarray(arr, dtype=np.float64)
        if a.shape != tuple(shape):
            raise EncodingError(
                f"array {i} has shape {a.shape}, descriptor says {tuple(shape)}"
            )
        parts.append(a.ravel(order="C"))
    if not parts:
        raise EncodingError("shape descriptor is empty")
    return as_param_vector(np.concatenate(parts))


def decode(vector: np.ndarray, layer_shapes: Sequence[Shape]) -> list[np.ndarray]:
    """Inverse of :func:`encode`; exact round-trip."""
    vec = np.asarray(vector, dtype=np.float64)
    expected = total_size(layer_shapes)
    if vec.ndim != 1 or vec.size != expected:
        raise EncodingError(
            f"vector has length {vec.size}, descriptor needs {expected}"
        )
    out = []
    offset = 0
    for shape in layer_shapes:
        n = int(np.prod(shape, dtype=np.int64))
        out.append(vec[offset : offset + n].reshape(shape).copy())
        offset += n
    return out


def fitness_key(fitness: float | None) -> float:
    """Ordering key: unevaluated or non-finite fitness sorts as +inf."""
    if fitness is None:
        return math.inf
    f = float(fitness)
    return f if math.isfinite(f) else math.inf


def rank(entries: Iterable[tuple[int, float]]) -> list[int]:
    """Ids ordered by ascending fitness, ties broken by ascending id."""
    items = list(entries)
    if not items:
        raise ValueError("rank: empty input")
    return [i for i, _ in sorted(items, key=lambda e: (fitness_key(e[1]), e[0]))]


@dataclass(frozen=True, eq=False)
class Individual:
    """One population member: genotype plus optimizer and cached fitness.

    ``fitness`` is None until evaluated; once set it is the validation loss of
    ``params`` (cache coherence is maintained by the driver, which re-caches
    after every accepted update).
    """

    id: int
    params: np.ndarray
    config: "OptimizerConfig | None" = None
    opt_state: "OptimizerState | None" = None
    fitness: float | None = None
    is_anchor: bool = False

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None


@dataclass(frozen=True, eq=False)
class Population:
    """Fixed-size set of individuals with exactly one anchor.

    ``next_id`` is the run-scoped counter for fresh offspring ids; it travels
    with the population so checkpoints restore id allocation exactly.
    """

    members: tuple[Individual, ...]
    generation: int
    next_id: int

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def anchor(self) -> Individual:
        anchors = [m for m in self.members if m.is_anchor]
        if len(anchors) != 1:
            raise ValueError(f"population has {len(anchors)} anchors, expected 1")
        return anchors[0]

    @property
    def non_anchor(self) -> tuple[Individual, ...]:
        return tuple(m for m in self.members if not m.is_anchor)

    def best(self) -> Individual:
        return min(self.members, key=lambda m: (fitness_key(m.fitness), m.id))

    def fitness_values(self) -> list[float]:
        return [fitness_key(m.fitness) for m in self.members]

    def validate(self, mu: int | None = None) -> None:
        if mu is not None and self.size != mu:
            raise ValueError(f"population size {self.size} != mu ({mu})")
        ids = [m.id for m in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate individual ids in population")
        self.anchor  # raises unless exactly one
        dims = {m.params.size for m in self.members}
        if len(dims) != 1:
            raise ValueError(f"mixed parameter dimensions in population: {dims}")


# --- run history ------------------------------------------------------------


@dataclass(frozen=True)
class AnchorSwitchEvent:
    """The anchor was exchanged with a strictly better pool member."""

    generation: int
    step: int
    old_fitness: float
    new_fitness: float


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best: float
    median: float
    anchor: float
    switched: bool
    lr_lower: float
    lr_upper: float
    non_finite: int = 0
    anchor_steps: tuple[float, ...] = ()
    switch_events: tuple[AnchorSwitchEvent, ...] = ()

    def to_dict(self) -> dict:
        d = {
            "generation": self.generation,
            "best": self.best,
            "median": self.median,
            "anchor": self.anchor,
            "switched": self.switched,
            "lr_lower": self.lr_lower,
            "lr_upper": self.lr_upper,
            "non_finite": self.non_finite,
            "anchor_steps": list(self.anchor_steps),
            "switch_events": [vars(e) for e in self.switch_events],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationRecord":
        return cls(
            generation=int(d["generation"]),
            best=float(d["best"]),
            median=float(d["median"]),
            anchor=float(d["anchor"]),
            switched=bool(d["switched"]),
            lr_lower=float(d["lr_lower"]),
            lr_upper=float(d["lr_upper"]),
            non_finite=int(d.get("non_finite", 0)),
            anchor_steps=tuple(float(x) for x in d.get("anchor_steps", ())),
            switch_events=tuple(
                AnchorSwitchEvent(**e) for e in d.get("switch_events", ())
            ),
        )


@dataclass(frozen=True)
class FineTuneRecord:
    epoch: int
    best: float
    median: float
    anchor: float

    def to_dict(self) -> dict:
        return vars(self).copy()

    @classmethod
    def from_dict(cls, d: dict) -> "FineTuneRecord":
        return cls(
            epoch=int(d["epoch"]),
            best=float(d["best"]),
            median=float(d["median"]),
            anchor=float(d["anchor"]),
        )


@dataclass
class RunHistory:
    """Per-generation and fine-tune records of one run; compares exactly."""

    records: list[GenerationRecord] = field(default_factory=list)
    fine_tune: list[FineTuneRecord] = field(default_factory=list)

    def best_curve(self) -> list[float]:
        return [r.best for r in self.records]

    def anchor_curve(self) -> list[float]:
        """Anchor fitness after every evolution step, flattened across generations."""
        out: list[float] = []
        for r in self.records:
            out.extend(r.anchor_steps if r.anchor_steps else (r.anchor,))
        return out

    def switch_events(self) -> list[AnchorSwitchEvent]:
        return [e for r in self.records for e in r.switch_events]

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "fine_tune": [r.to_dict() for r in self.fine_tune],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunHistory":
        return cls(
            records=[GenerationRecord.from_dict(r) for r in d.get("records", ())],
            fine_tune=[FineTuneRecord.from_dict(r) for r in d.get("fine_tune", ())],
        )


# --- parameter-vector serialization ------------------------------------------

_LEN = struct.Struct("<Q")


def write_param_vector(stream: IO[bytes], vector: np.ndarray) -> None:
    """Binary layout: u64 little-endian length, then float64 little-endian values."""
    vec = np.ascontiguousarray(vector, dtype="<f8")
    stream.write(_LEN.pack(vec.size))
    stream.write(vec.tobytes())


def read_param_vector(stream: IO[bytes]) -> np.ndarray:
    raw = stream.read(_LEN.size)
    if len(raw) != _LEN.size:
        raise EncodingError("truncated parameter vector: missing length header")
    (n,) = _LEN.unpack(raw)
    data = stream.read(8 * n)
    if len(data) != 8 * n:
        raise EncodingError(
            f"truncated parameter vector: expected {n} values, got {len(data) // 8}"
        )
    return as_param_vector(np.frombuffer(data, dtype="<f8"))


def save_params(path, vector: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_param_vector(f, vector)


def load_params(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_param_vector(f)
