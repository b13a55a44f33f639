"""Named parameter registry and the Adam optimizer."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import GraphError, Tensor, parameter


class ParameterStore:
    """Flat, ordered registry of named learnable tensors.

    Iteration order is insertion order, which fixes the checkpoint layout
    and makes optimizer sweeps deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = parameter(np.array(values, dtype=np.float64))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        """Deep copy of all parameter values."""
        return {name: t.values.copy() for name, t in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite registered parameters in place from a snapshot."""
        for name, t in self._params.items():
            if name not in values:
                raise KeyError(f"snapshot missing parameter {name!r}")
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(
                    f"snapshot shape mismatch for {name!r}: {arr.shape} != {t.shape}")
            t.values[...] = arr


def seed_for(seed: int, name: str) -> np.random.Generator:
    """Per-name RNG so initialization is independent of registration order."""
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(name.encode()))))


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one parameter store."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParameterStore, lr: float = 1e-3, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        for name, p in store.items():
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        return state


def adam_step(store: ParameterStore, state: AdamState) -> None:
    """Bias-corrected Adam update in place; grads are zeroed afterwards.

    Every registered parameter must have a populated gradient (a parameter
    that never flowed into the loss is a wiring bug, not a zero-grad case).
    """
    for name, p in store.items():
        if not p.grad_populated:
            raise GraphError(f"adam_step: parameter {name!r} has no gradient")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in store.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()
