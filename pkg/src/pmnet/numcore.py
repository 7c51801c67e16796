"""Dense float64 helpers, stable nonlinearities and a finite-difference oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 stored
row-major, with rows indexing samples or prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinity showed up where a finite value is required."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def softmax_row(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax_row: empty input")
    return softmax(v[None, :])[0]


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class TapeEntry:
    name: str
    value: np.ndarray
    grad: np.ndarray


@dataclass
class ParamTape:
    """Ordered registry of trainable arrays and their gradient buffers.

    Values are held by reference, so in-place optimizer updates land directly
    in the owning model.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def add(self, name: str, value: np.ndarray, grad: np.ndarray | None = None) -> None:
        if any(e.name == name for e in self.entries):
            raise ValueError(f"duplicate parameter id {name!r}")
        if grad is None:
            grad = np.zeros_like(value)
        if grad.shape != value.shape:
            raise ShapeError(f"{name}: grad {grad.shape} != value {value.shape}")
        self.entries.append(TapeEntry(name, value, grad))

    def __iter__(self) -> Iterator[TapeEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> TapeEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def zero_grad(self) -> None:
        for e in self.entries:
            e.grad[...] = 0.0

    def set_grads(self, grads: dict[str, np.ndarray]) -> None:
        for e in self.entries:
            g = grads[e.name]
            if g.shape != e.value.shape:
                raise ShapeError(f"{e.name}: grad {g.shape} != value {e.value.shape}")
            e.grad[...] = g


def finite_diff_grad(
    loss_fn: Callable[[], float], params: ParamTape, epsilon: float = 1e-6
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` w.r.t. every tape entry.

    ``loss_fn`` takes no arguments and must read the parameters through the
    arrays registered on the tape; each scalar is perturbed in place and
    restored afterwards.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out = {}
    for e in params:
        g = np.zeros_like(e.value)
        flat = e.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(loss_fn())
            flat[i] = orig - epsilon
            fm = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {e.name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * epsilon)
        out[e.name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")
