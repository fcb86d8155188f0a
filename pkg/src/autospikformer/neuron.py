"""Iterative leaky integrate-and-fire neurons.

Membrane update, with decay ``1 - 1/tau`` and hard spikes::

    u[t] = (1 - 1/tau) * u[t-1] * (1 - y[t-1]) + I[t]
    y[t] = 1 if u[t] >= u_th else 0

The reset is carried by the ``(1 - y[t-1])`` factor of the *next* step; the
potential is never clamped at fire time.  Training uses a rectangular
surrogate for ``dy/du``: ``1/(2a)`` inside ``|u - u_th| < a``, zero outside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, make_node

DEFAULT_TAU = 2.0
DEFAULT_U_TH = 0.5
SURROGATE_WIDTH = 1.0


@dataclass(frozen=True)
class LifParams:
    u_th: float = DEFAULT_U_TH
    tau: float = DEFAULT_TAU
    surrogate_width: float = SURROGATE_WIDTH

    def __post_init__(self):
        if not self.tau > 1.0:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if not self.u_th > 0.0:
            raise ValueError(f"u_th must be positive, got {self.u_th}")
        if not self.surrogate_width > 0.0:
            raise ValueError("surrogate_width must be positive")

    @property
    def decay(self) -> float:
        return 1.0 - 1.0 / self.tau


@dataclass
class LifState:
    u: np.ndarray
    y: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "LifState":
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))


@dataclass
class FiringStats:
    spikes_emitted: int = 0
    neuron_steps: int = 0

    @property
    def fr(self) -> float:
        if self.neuron_steps == 0:
            return 0.0
        return self.spikes_emitted / self.neuron_steps

    def __add__(self, other: "FiringStats") -> "FiringStats":
        return FiringStats(
            self.spikes_emitted + other.spikes_emitted,
            self.neuron_steps + other.neuron_steps,
        )

    @classmethod
    def of(cls, spikes: np.ndarray) -> "FiringStats":
        return cls(int(np.count_nonzero(spikes)), int(spikes.size))


def lif_step(state: LifState, input_current: np.ndarray, params: LifParams) -> LifState:
    """Advance one time-step."""
    I = np.asarray(input_current)
    if I.shape != state.u.shape:
        raise ShapeError(f"input shape {I.shape} does not match state {state.u.shape}")
    if not np.all(np.isfinite(I)):
        raise NonFiniteError("non-finite input current")
    u = params.decay * state.u * (1.0 - state.y) + I
    y = (u >= params.u_th).astype(state.y.dtype)
    return LifState(u.astype(state.u.dtype), y)


def lif_sequence(inputs: np.ndarray, params: LifParams) -> tuple[np.ndarray, FiringStats]:
    """Run ``inputs[T, ...]`` from rest (u=0, y=0); return spikes and stats."""
    inputs = np.asarray(inputs, dtype=np.float32)
    if inputs.ndim == 0 or inputs.shape[0] == 0:
        raise ValueError("lif_sequence needs at least one time-step")
    state = LifState.zeros(inputs.shape[1:], inputs.dtype)
    spikes = np.empty_like(inputs)
    for t in range(inputs.shape[0]):
        state = lif_step(state, inputs[t], params)
        spikes[t] = state.y
    return spikes, FiringStats.of(spikes)


def surrogate_grad(u, params: LifParams) -> np.ndarray:
    """Rectangular-window pseudo-derivative of the spike w.r.t. potential."""
    u = np.asarray(u)
    a = params.surrogate_width
    inside = np.abs(u - params.u_th) < a
    return np.where(inside, 1.0 / (2.0 * a), 0.0).astype(u.dtype if u.dtype.kind == "f" else np.float32)


def surrogate_spike(u, params: LifParams) -> np.ndarray:
    """Clamped ramp whose derivative is :func:`surrogate_grad`.

    Only used to give finite-difference gradient checks a differentiable
    forward pass; real inference always emits hard spikes.
    """
    a = params.surrogate_width
    return np.clip((np.asarray(u) - params.u_th) / (2.0 * a) + 0.5, 0.0, 1.0)


def lif(x: Tensor, params: LifParams, smooth: bool = False) -> Tensor:
    """Differentiable LIF over the leading time axis of ``x[T, ...]``.

    Forward emits hard spikes (``smooth=False``) or the surrogate ramp.
    Backward is full BPTT through both the leak and the reset path, using the
    rectangular surrogate for every ``dy/du``.
    """
    I = x.data
    T = I.shape[0]
    d = params.decay
    u = np.empty_like(I)
    y = np.empty_like(I)
    u_prev = np.zeros(I.shape[1:], I.dtype)
    y_prev = np.zeros(I.shape[1:], I.dtype)
    for t in range(T):
        u_t = d * u_prev * (1.0 - y_prev) + I[t]
        if smooth:
            y_t = surrogate_spike(u_t, params).astype(I.dtype)
        else:
            y_t = (u_t >= params.u_th).astype(I.dtype)
        u[t], y[t] = u_t, y_t
        u_prev, y_prev = u_t, y_t

    def bw(g):
        sg = surrogate_grad(u, params)
        gI = np.empty_like(g)
        gu_next = np.zeros(I.shape[1:], g.dtype)
        for t in range(T - 1, -1, -1):
            gy = g[t] - gu_next * d * u[t]
            gu = gy * sg[t] + gu_next * d * (1.0 - y[t])
            gI[t] = gu
            gu_next = gu
        return (gI,)

    return make_node(y, (x,), bw)
