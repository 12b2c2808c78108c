"""Neuron models: LIF / soft-LIF and rectified-linear rate functions, their
clock-driven spiking counterparts, and the first-order synaptic filter.

Rate functions are vectorized over numpy arrays. The spiking steppers update
their state objects in place and also return them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Tensor, _node, ensure_tensor


class UndefinedGradientError(ValueError):
    """The hard-rectified LIF rate has no derivative at or below threshold."""


@dataclass(frozen=True)
class NeuronParams:
    tau_rc: float = 0.02
    tau_ref: float = 0.002
    v_th: float = 1.0
    gamma: float = 0.005
    amplitude: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.tau_rc > 0:
            raise ValueError(f"tau_rc must be > 0, got {self.tau_rc}")
        if not self.tau_ref >= 0:
            raise ValueError(f"tau_ref must be >= 0, got {self.tau_ref}")
        if not self.v_th > 0:
            raise ValueError(f"v_th must be > 0, got {self.v_th}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.amplitude > 0:
            raise ValueError(f"amplitude must be > 0, got {self.amplitude}")
        if not self.scale >= 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")

    def with_scale(self, scale: float) -> "NeuronParams":
        return replace(self, scale=float(scale))


# ---------------------------------------------------------------------------
# rectifiers
# ---------------------------------------------------------------------------

def rho_hard(x):
    return np.maximum(x, 0.0)


def rho_soft(x, gamma: float):
    """Softplus rectifier ``gamma * log(1 + exp(x / gamma))``."""
    if not gamma > 0:
        raise ValueError("rho_soft needs gamma > 0")
    return gamma * np.logaddexp(0.0, np.asarray(x, dtype=np.float64) / gamma)


def _soft_lif(j, p: NeuronParams, dtype=np.float64):
    """Soft-LIF rate and its derivative, evaluated together in ``dtype``."""
    j = np.asarray(j, dtype=dtype)
    z = (j - dtype(p.v_th)) / dtype(p.gamma)
    low = z < -30.0  # softplus(z) == e^z to ~1e-13 relative below here
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    rho = p.gamma * (np.maximum(z, 0.0) + np.log1p(e))
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        q = np.where(low, math.log(p.v_th / p.gamma) - z, np.log1p(p.v_th / rho))
        dq = np.where(low, -1.0 / p.gamma, -p.v_th * sig / (rho * (rho + p.v_th)))
    unit_rate = 1.0 / (p.tau_ref + p.tau_rc * q)
    rate = p.amplitude * unit_rate
    grad = -p.amplitude * p.tau_rc * dq * unit_rate * unit_rate
    return rate.astype(dtype, copy=False), grad.astype(dtype, copy=False)


def lif_rate(j, params: NeuronParams, smoothing: str = "soft"):
    """Steady-state LIF firing rate (Hz times ``amplitude``) for input current ``j``."""
    p = params
    if smoothing == "soft" and p.gamma > 0:
        return _soft_lif(j, p)[0]
    if smoothing not in ("soft", "hard"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    x = np.asarray(j, dtype=np.float64) - p.v_th
    pos = x > 0
    safe = np.where(pos, x, 1.0)
    rate = p.amplitude / (p.tau_ref + p.tau_rc * np.log1p(p.v_th / safe))
    return np.where(pos, rate, 0.0)


def lif_rate_gradient(j, params: NeuronParams, smoothing: str = "soft"):
    """Analytic ``d lif_rate / d j``."""
    p = params
    if smoothing == "soft" and p.gamma > 0:
        return _soft_lif(j, p)[1]
    x = np.asarray(j, dtype=np.float64) - p.v_th
    if np.any(x <= 0):
        raise UndefinedGradientError("hard LIF rate is not differentiable at or below threshold")
    q = np.log1p(p.v_th / x)
    denom = p.tau_ref + p.tau_rc * q
    return p.amplitude * p.tau_rc * (p.v_th / (x * (x + p.v_th))) / denom**2


def relu_rate(j, params: NeuronParams):
    return params.amplitude * np.maximum(np.asarray(j, dtype=np.float64), 0.0)


def relu_rate_gradient(j, params: NeuronParams):
    return params.amplitude * (np.asarray(j, dtype=np.float64) > 0).astype(np.float64)


# autodiff wrappers used by the network graph

def soft_lif(j, params: NeuronParams) -> Tensor:
    j = ensure_tensor(j)
    out, grad = _soft_lif(j.data, params, j.dtype.type)
    return _node(out, (j,), "soft_lif", lambda g: ((j, g * grad),))


def rectified_linear(j, params: NeuronParams) -> Tensor:
    j = ensure_tensor(j)
    mask = j.data > 0
    out = (params.amplitude * j.data * mask).astype(j.dtype)
    return _node(out, (j,), "relu_rate", lambda g: ((j, g * (params.amplitude * mask)),))


# ---------------------------------------------------------------------------
# spiking dynamics
# ---------------------------------------------------------------------------

@dataclass
class LifState:
    voltage: np.ndarray
    refractory_remaining: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "LifState":
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))


def lif_spike_step(state: LifState, j, dt: float, params: NeuronParams):
    """Advance LIF neurons by one step of length ``dt``.

    The membrane is integrated exactly for a constant current over the
    non-refractory part of the step. A crossing is timed inside the step so
    the refractory period starts at the true spike time. With ``scale`` s the
    time constants are compressed by s and spike height divided by s, which
    multiplies the firing rate by s and leaves the mean output unchanged.

    Returns ``(spikes, state)``; spikes are 0 or ``amplitude / (dt * scale)``.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    p = params
    tau_rc = p.tau_rc / p.scale
    tau_ref = p.tau_ref / p.scale
    v = state.voltage
    j = np.ascontiguousarray(np.broadcast_to(np.asarray(j, dtype=v.dtype), v.shape))
    step = _lif_kernel if _lif_kernel is not None else _lif_step_numpy
    spiked = step(v.reshape(-1), state.refractory_remaining.reshape(-1), j.reshape(-1),
                  dt, tau_rc, tau_ref, p.v_th).reshape(v.shape)
    spikes = spiked * v.dtype.type(p.amplitude / (dt * p.scale))
    return spikes, state


def _lif_step_numpy(v, ref, j, dt, tau_rc, tau_ref, v_th):
    gain = -np.expm1(-np.clip(dt - ref, 0.0, dt) / tau_rc).astype(v.dtype)
    v += (j - v) * gain
    spiked = v >= v_th
    with np.errstate(divide="ignore", invalid="ignore"):
        after = -tau_rc * np.log1p(-(v - v_th) / (j - v_th))
    after = np.clip(np.nan_to_num(after, nan=0.0, posinf=dt), 0.0, dt)
    ref[:] = np.where(spiked, np.maximum(tau_ref - after, 0.0), np.maximum(ref - dt, 0.0))
    v[:] = np.where(spiked, 0.0, np.maximum(v, 0.0))
    return spiked


try:
    import numba
except ImportError:  # pragma: no cover
    _lif_kernel = _lif_fused = _relu_fused = None
else:
    @numba.njit(cache=True, error_model="numpy")
    def _lif_kernel(v, ref, j, dt, tau_rc, tau_ref, v_th):
        spiked = np.zeros(v.size, dtype=np.bool_)
        full = -math.expm1(-dt / tau_rc)
        for i in range(v.size):
            r = ref[i]
            if r >= dt:
                gain = 0.0
            elif r > 0.0:
                gain = -math.expm1(-(dt - r) / tau_rc)
            else:
                gain = full
            vi = v[i] + (j[i] - v[i]) * gain
            r = max(r - dt, 0.0)
            if vi >= v_th:
                after = 0.0
                if j[i] > v_th:
                    arg = -(vi - v_th) / (j[i] - v_th)
                    if arg > -1.0:
                        after = min(max(-tau_rc * math.log1p(arg), 0.0), dt)
                    else:
                        after = dt
                r = max(tau_ref - after, 0.0)
                vi = 0.0
                spiked[i] = True
            v[i] = max(vi, 0.0)
            ref[i] = r
        return spiked

    @numba.njit(cache=True, error_model="numpy")
    def _lif_fused(v, ref, j, filt, counts, dt, tau_rc, tau_ref, v_th, decay, height):
        full = -math.expm1(-dt / tau_rc)
        for i in range(v.size):
            r = ref[i]
            if r >= dt:
                gain = 0.0
            elif r > 0.0:
                gain = -math.expm1(-(dt - r) / tau_rc)
            else:
                gain = full
            vi = v[i] + (j[i] - v[i]) * gain
            r = max(r - dt, 0.0)
            out = 0.0
            if vi >= v_th:
                after = 0.0
                if j[i] > v_th:
                    arg = -(vi - v_th) / (j[i] - v_th)
                    if arg > -1.0:
                        after = min(max(-tau_rc * math.log1p(arg), 0.0), dt)
                    else:
                        after = dt
                r = max(tau_ref - after, 0.0)
                vi = 0.0
                out = height
                counts[i] += 1.0
            v[i] = max(vi, 0.0)
            ref[i] = r
            filt[i] = decay * filt[i] + (1.0 - decay) * out

    @numba.njit(cache=True, error_model="numpy")
    def _relu_fused(v, j, filt, counts, gain, decay, height):
        for i in range(v.size):
            vi = v[i] + gain * max(j[i], 0.0)
            n = math.floor(vi)
            v[i] = vi - n
            counts[i] += n
            filt[i] = decay * filt[i] + (1.0 - decay) * (n * height)


def fused_step(kind: str, state, j, dt: float, params: NeuronParams, filtered, counts,
               decay: float):
    """One spiking step that also filters the spikes and tallies them in place.

    Same numbers as ``*_spike_step`` followed by ``synapse_step`` and
    ``spike_counts``, in one pass over memory. ``decay`` 0 disables the filter
    (``filtered`` then holds the raw spike output). Needs numba.
    """
    p = params
    height = p.amplitude / (dt * p.scale)
    flat = lambda a: a.reshape(-1)
    j = np.ascontiguousarray(j, dtype=filtered.dtype)
    if kind == "lif":
        _lif_fused(flat(state.voltage), flat(state.refractory_remaining), flat(j), flat(filtered),
                   flat(counts), dt, p.tau_rc / p.scale, p.tau_ref / p.scale, p.v_th, decay, height)
    else:
        _relu_fused(flat(state.voltage), flat(j), flat(filtered), flat(counts), dt * p.scale,
                    decay, height)
    return filtered


@dataclass
class ReluState:
    voltage: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "ReluState":
        return cls(np.zeros(shape, dtype))


def relu_spike_step(state: ReluState, j, dt: float, params: NeuronParams):
    """Spiking rectified-linear step; several spikes per step are allowed."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    p = params
    v = state.voltage
    v += (dt * p.scale) * np.maximum(np.asarray(j, dtype=v.dtype), 0.0)
    n = np.floor(v)
    v -= n
    return n * v.dtype.type(p.amplitude / (dt * p.scale)), state


def spike_counts(spikes: np.ndarray, dt: float, params: NeuronParams) -> np.ndarray:
    """Number of spikes encoded in a spike-output array."""
    return np.rint(spikes * (dt * params.scale) / params.amplitude)


@dataclass
class SynapseState:
    """First-order low-pass filter, zero-order-hold discretization."""

    tau_syn: float
    dt: float
    filtered_value: np.ndarray | float = 0.0
    decay: float = field(init=False)

    def __post_init__(self):
        if not self.tau_syn > 0 or not self.dt > 0:
            raise ValueError("synapse needs tau_syn > 0 and dt > 0")
        self.decay = math.exp(-self.dt / self.tau_syn)


def synapse_step(state: SynapseState, x):
    a = state.decay
    state.filtered_value = a * state.filtered_value + (1.0 - a) * np.asarray(x)
    return state.filtered_value
