"""Named parameter slots, plain SGD and the finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .tensor import Node, backward, no_grad


class Param(Node):
    """A leaf slot. ``trainable`` is fixed at construction."""

    __slots__ = ("name", "_trainable")

    def __init__(self, name: str, value, trainable: bool):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=trainable)
        self.name = name
        self._trainable = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable

    def assign(self, value) -> None:
        """Replace the value with a fresh array (the old one is never mutated)."""
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self.value.shape:
            raise ValueError(f"{self.name}: cannot assign shape {arr.shape} to {self.value.shape}")
        self.value = arr

    def __repr__(self) -> str:
        kind = "trainable" if self._trainable else "frozen"
        return f"Param({self.name!r}, shape={self.shape}, {kind})"


class ParamStore:
    """Map from slot name to :class:`Param`; iteration is sorted by name."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._slots: dict[str, Param] = {}

    def add(self, name: str, value, trainable: bool) -> Param:
        if name in self._slots:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Param(name, value, trainable)
        self._slots[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._slots[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __len__(self) -> int:
        return len(self._slots)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._slots))

    def items(self) -> list[tuple[str, Param]]:
        return [(k, self._slots[k]) for k in sorted(self._slots)]

    def trainable(self) -> list[tuple[str, Param]]:
        return [(k, p) for k, p in self.items() if p.trainable]

    def frozen(self) -> list[tuple[str, Param]]:
        return [(k, p) for k, p in self.items() if not p.trainable]

    def zero_grad(self) -> None:
        for _, p in self.trainable():
            p.grad = np.zeros_like(p.value)

    def clear_grad(self) -> None:
        for _, p in self.items():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.items()}

    def num_trainable(self) -> int:
        return sum(p.value.size for _, p in self.trainable())


def sgd_step(params: ParamStore, lr: float) -> None:
    """theta <- theta - lr * grad on trainable slots, then clear all grads."""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    missing = [k for k, p in params.trainable() if p.grad is None]
    if missing:
        raise RuntimeError(f"no gradient for trainable slots: {', '.join(missing)}")
    for _, p in params.trainable():
        p.assign(p.value - lr * p.grad)
    params.clear_grad()


def relative_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def finite_diff_errors(f: Callable[[ParamStore], Node], params: ParamStore,
                       step: float = 1e-5) -> dict[str, float]:
    """Per-slot max relative error between backprop and central differences."""
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")

    def value_of(out) -> float:
        v = float(np.asarray(out.value if isinstance(out, Node) else out))
        if not np.isfinite(v):
            raise FloatingPointError("objective returned a non-finite value")
        return v

    params.clear_grad()
    loss = f(params)
    value_of(loss)
    backward(loss)
    analytic = {k: (np.zeros_like(p.value) if p.grad is None else p.grad.copy())
                for k, p in params.trainable()}
    params.clear_grad()

    errors = {}
    for name, p in params.trainable():
        base = p.value
        numeric = np.empty_like(base)
        for idx in np.ndindex(base.shape):
            probe = base.copy()
            probe[idx] = base[idx] + step
            p.value = probe
            with no_grad():
                hi = value_of(f(params))
            probe = base.copy()
            probe[idx] = base[idx] - step
            p.value = probe
            with no_grad():
                lo = value_of(f(params))
            numeric[idx] = (hi - lo) / (2.0 * step)
        p.value = base
        errors[name] = float(relative_error(analytic[name], numeric).max())
    params.clear_grad()
    return errors


def finite_diff_check(f: Callable[[ParamStore], Node], params: ParamStore,
                      step: float = 1e-5) -> float:
    """Largest relative error over every trainable scalar.

    Relative error is ``|a - n| / max(1, |a|, |n|)`` with ``a`` from
    backprop and ``n`` from central differences of width ``2 * step``.
    """
    errors = finite_diff_errors(f, params, step)
    return max(errors.values(), default=0.0)
