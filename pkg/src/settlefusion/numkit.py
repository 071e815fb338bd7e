"""Dense numerics: deterministic RNG streams, initializers, Adam, activations.

All floating point work is float64. Matrices are plain 2-D numpy arrays in
row-major order. ``matmul`` is the single product kernel used everywhere a
bit-exactness contract applies: it processes fixed-size row blocks so that
each output row is a pure function of that row and the weight matrix,
independent of batch size, composition, and row position. Plain ``@`` does
not have this property (BLAS dispatches different kernels by shape).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

_MASK64 = (1 << 64) - 1

# Row-block size for matmul. Must stay fixed: changing it changes results at
# the last-bit level and breaks checkpoint reproducibility.
BLOCK_ROWS = 256


def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Compute ``x @ w`` block-row-wise so results decompose row by row.

    Every row of the output is bit-identical whether computed alone, inside
    another batch, or at a different position; the final partial block is
    zero-padded to the fixed block size before the product.
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
    n = x.shape[0]
    out = np.empty((n, w.shape[1]), dtype=np.float64)
    for start in range(0, n, BLOCK_ROWS):
        end = min(start + BLOCK_ROWS, n)
        if end - start == BLOCK_ROWS:
            out[start:end] = x[start:end] @ w
        else:
            pad = np.zeros((BLOCK_ROWS, x.shape[1]), dtype=np.float64)
            pad[: end - start] = x[start:end]
            out[start:end] = (pad @ w)[: end - start]
    return out


def _child_seed(seed: int, tag: str) -> int:
    digest = hashlib.blake2b(f"{seed & _MASK64}/{tag}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


@dataclass
class RngStream:
    """Counter-based random stream.

    Each draw opens a fresh Philox generator keyed by ``(seed, counter)`` and
    advances the counter, so the value of draw k depends only on (seed, k),
    never on how many numbers earlier draws consumed. ``split`` derives an
    independent named stream; derivation is a stable hash, so child streams
    are reproducible across runs and platforms.
    """

    seed: int
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.counter & _MASK64], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._generator().normal(mean, std, size=shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def split(self, tag: str | int) -> "RngStream":
        return RngStream(seed=_child_seed(self.seed, str(tag)))


def glorot_normal(fan_in: int, fan_out: int, rng: RngStream) -> np.ndarray:
    """Draw a (fan_in, fan_out) weight matrix ~ N(0, 2/(fan_in+fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan dimensions must be >= 1, got ({fan_in}, {fan_out})")
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(shape=(fan_in, fan_out), std=std)


@dataclass(frozen=True)
class LrSchedule:
    """Continuous exponential decay: lr(step) = initial * rate^(step/decay_steps)."""

    initial: float = 1e-3
    decay_steps: int = 1000
    decay_rate: float = 0.9

    def __post_init__(self):
        if self.initial <= 0 or self.decay_steps <= 0 or not (0 < self.decay_rate <= 1):
            raise ValueError(f"invalid schedule {self}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return schedule.initial * schedule.decay_rate ** (step / schedule.decay_steps)


def tanh_act(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_grad(y: np.ndarray) -> np.ndarray:
    """Derivative of tanh expressed through the activated value y = tanh(x)."""
    return 1.0 - y * y


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter array."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    zeros = [np.zeros_like(p) for p in params]
    return AdamState(m=zeros, v=[np.zeros_like(p) for p in params],
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update with bias correction. Pure: returns fresh arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * (g * g)
        update = lr * (m2 / c1) / (np.sqrt(v2 / c2) + state.eps)
        new_m.append(m2)
        new_v.append(v2)
        new_p.append(p - update)
    return new_p, AdamState(m=new_m, v=new_v, step=t,
                            beta1=b1, beta2=b2, eps=state.eps)
