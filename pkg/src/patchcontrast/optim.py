"""Parameter collection, the AdamW update and global-norm gradient clipping."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import DiffTensor

ADAMW_BETAS = (0.9, 0.999)
ADAMW_EPS = 1e-8
ADAMW_WEIGHT_DECAY = 0.01


class Parameters:
    """Named collection of tracked leaf tensors plus per-leaf AdamW state.

    The step counter is shared across all leaves and increases once per
    ``adamw_step``. Moment buffers are allocated lazily on the first step
    and always match their leaf's shape.
    """

    def __init__(self):
        self._leaves: dict[str, DiffTensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data, dtype=np.float32) -> DiffTensor:
        if name in self._leaves:
            raise ValueError(f"parameter {name!r} already registered")
        leaf = DiffTensor(np.asarray(data, dtype=dtype), requires_grad=True)
        self._leaves[name] = leaf
        return leaf

    def __getitem__(self, name: str) -> DiffTensor:
        return self._leaves[name]

    def __contains__(self, name: str) -> bool:
        return name in self._leaves

    def __len__(self) -> int:
        return len(self._leaves)

    def names(self) -> list[str]:
        return list(self._leaves)

    def items(self) -> Iterator[tuple[str, DiffTensor]]:
        return iter(self._leaves.items())

    def moments(self, name: str) -> tuple[np.ndarray | None, np.ndarray | None]:
        return self._m.get(name), self._v.get(name)

    def scalar_count(self) -> int:
        return sum(leaf.size for leaf in self._leaves.values())

    def zero_grad(self) -> None:
        for leaf in self._leaves.values():
            leaf.zero_grad()

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite leaf values in place (checkpoint restore)."""
        missing = set(self._leaves) - set(values)
        extra = set(values) - set(self._leaves)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, leaf in self._leaves.items():
            arr = np.asarray(values[name], dtype=leaf.dtype)
            if arr.shape != leaf.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != expected {leaf.shape}")
            leaf.data[...] = arr


def adamw_step(
    params: Parameters,
    lr: float,
    betas: tuple[float, float] = ADAMW_BETAS,
    weight_decay: float = ADAMW_WEIGHT_DECAY,
    eps: float = ADAMW_EPS,
) -> None:
    """One decoupled-weight-decay Adam update over every leaf.

    Grads are left untouched; the caller resets them between steps.
    """
    b1, b2 = betas
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, leaf in params.items():
        if leaf.grad is None:
            raise ValueError(f"adamw_step: leaf {name!r} has no gradient")
        g = leaf.grad
        m = params._m.get(name)
        if m is None:
            m = params._m[name] = np.zeros_like(leaf.data)
            params._v[name] = np.zeros_like(leaf.data)
        v = params._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        leaf.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * leaf.data)


def clip_gradients(params: Parameters, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("clip_gradients: max_norm must be positive")
    total = 0.0
    for name, leaf in params.items():
        if leaf.grad is None:
            raise ValueError(f"clip_gradients: leaf {name!r} has no gradient")
        total += float(np.sum(leaf.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for _, leaf in params.items():
            leaf.grad *= scale
    return norm
