"""Clock-driven spiking rollouts of a converted network."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import math

import numpy as np

from . import tensor as T
from .graph import LayerSpec, NetworkSpec, layer_current
from .neuron import (LifState, ReluState, SynapseState, fused_step, lif_spike_step,
                     relu_spike_step, spike_counts, synapse_step)
from . import neuron
from .tensor import ShapeError


FUSED = neuron._lif_fused is not None


class InvalidStateError(RuntimeError):
    """Operation applied to a network in the wrong mode."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.001
    n_steps: int = 200
    synapse: float | None = None  # None: use the network's own synapse
    readout: str = "last_step"  # or "mean_last_k"
    k: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.readout not in ("last_step", "mean_last_k"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.readout == "mean_last_k" and not 1 <= self.k <= self.n_steps:
            raise ValueError("readout window k must satisfy 1 <= k <= n_steps")

    @property
    def window(self) -> int:
        return self.k if self.readout == "mean_last_k" else 1


@dataclass
class SpikeRecord:
    layer_indices: list[int]
    spike_counts: list[int]
    neuron_counts: list[int]
    duration: float
    n_samples: int = 1

    def layer_rates(self) -> list[float]:
        return [c / (n * self.n_samples * self.duration)
                for c, n in zip(self.spike_counts, self.neuron_counts)]

    def merge(self, other: "SpikeRecord") -> "SpikeRecord":
        if other.layer_indices != self.layer_indices or other.duration != self.duration:
            raise ValueError("can only merge records of the same network and duration")
        return SpikeRecord(self.layer_indices,
                           [a + b for a, b in zip(self.spike_counts, other.spike_counts)],
                           self.neuron_counts, self.duration, self.n_samples + other.n_samples)


def average_firing_rate(rec: SpikeRecord) -> float:
    """Total spikes divided by (neurons x samples x duration), in Hz."""
    if not rec.duration > 0:
        raise ValueError("record duration must be > 0")
    neurons = sum(rec.neuron_counts) * rec.n_samples
    if neurons == 0:
        return 0.0
    return float(sum(rec.spike_counts)) / (neurons * rec.duration)


@dataclass
class Rollout:
    """Everything a spiking run produces, including what hybrid training needs."""

    output: np.ndarray
    record: SpikeRecord
    signal_means: list[np.ndarray] = field(default_factory=list)
    neuron_spikes: dict[int, np.ndarray] = field(default_factory=dict)


def _new_state(layer: LayerSpec, shape):
    cls = LifState if layer.neuron == "lif" else ReluState
    return cls.zeros(shape, np.float32)


def _current(layer: LayerSpec, w: dict, h: np.ndarray) -> np.ndarray:
    return layer_current(layer, w, T.Tensor(h)).data


def simulate(net: NetworkSpec, x, cfg: SimConfig = SimConfig(),
             keep_means: bool = False) -> Rollout:
    """Present ``x`` as a constant input for ``cfg.n_steps`` steps.

    Each spiking layer's output is low-pass filtered (when a synapse is set)
    before the next layer's weights. Non-spiking layers (pooling, the output
    layer) pass their current straight through.
    """
    if net.mode != "snn":
        raise InvalidStateError("run_snn needs a converted (snn-mode) network")
    x = np.asarray(x, dtype=np.float32)
    if x.shape == net.input_shape:
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")
    n = x.shape[0]
    tau = cfg.synapse if cfg.synapse is not None else net.synapse
    dt = cfg.dt
    layers = net.layers
    states = {i: _new_state(l, (n,) + l.out_shape) for i, l in enumerate(layers) if l.is_spiking}
    filters = {i: SynapseState(tau, dt, np.zeros((n,) + l.out_shape, dtype=np.float32))
               for i, l in enumerate(layers) if l.is_spiking and tau}
    counts = {i: np.zeros((n,) + l.out_shape, dtype=np.float32) for i, l in enumerate(layers) if l.is_spiking}
    decay = math.exp(-dt / tau) if tau else 0.0
    outputs = {i: np.zeros((n,) + l.out_shape, dtype=np.float32)
               for i, l in enumerate(layers) if l.is_spiking}
    sums = [np.zeros((n,) + l.out_shape, dtype=np.float64) for l in layers] if keep_means else []

    first_current = _current(layers[0], net.weights[0], x)
    readout = np.zeros((n,) + net.output_shape, dtype=np.float64)
    window_start = cfg.n_steps - cfg.window
    for t in range(cfg.n_steps):
        h = None
        for i, layer in enumerate(layers):
            j = first_current if i == 0 else _current(layer, net.weights[i], h)
            if layer.is_spiking and FUSED:
                h = fused_step(layer.neuron, states[i], j, dt, layer.params, outputs[i],
                               counts[i], decay)
            elif layer.is_spiking:
                step = lif_spike_step if layer.neuron == "lif" else relu_spike_step
                spikes, _ = step(states[i], j, dt, layer.params)
                counts[i] += spike_counts(spikes, dt, layer.params)
                h = synapse_step(filters[i], spikes) if i in filters else spikes
            else:
                h = j
            if keep_means and t >= window_start:
                sums[i] += h
        if t >= window_start:
            readout += h
    readout /= cfg.window

    spiking = [i for i, l in enumerate(layers) if l.is_spiking]
    record = SpikeRecord(spiking, [int(counts[i].sum()) for i in spiking],
                         [layers[i].n_neurons for i in spiking], cfg.n_steps * dt, n)
    means = [s / cfg.window for s in sums]
    return Rollout(readout.astype(np.float32), record, means, counts)


def run_snn(net: NetworkSpec, x, cfg: SimConfig = SimConfig()):
    """Spiking inference; returns ``(output, SpikeRecord)``."""
    roll = simulate(net, x, cfg)
    return roll.output, roll.record


def run_snn_batched(net: NetworkSpec, x, cfg: SimConfig = SimConfig(), batch_size: int = 32):
    x = np.asarray(x, dtype=np.float32)
    outs, rec = [], None
    for i in range(0, len(x), batch_size):
        out, r = run_snn(net, x[i:i + batch_size], cfg)
        outs.append(out)
        rec = r if rec is None else rec.merge(r)
    return np.concatenate(outs), rec


def apply_post_training_scaling(net: NetworkSpec, s: float) -> NetworkSpec:
    """Set every neuron's ``scale`` to ``s``.

    Inputs are multiplied and spike heights divided by ``s`` inside the
    neurons, so rate-mode outputs do not change; spiking rates grow by ``s``.
    """
    if not s > 0:
        raise ValueError("scale must be > 0")
    layers = [replace(l, params=l.params.with_scale(s)) if l.has_neurons else l
              for l in net.layers]
    return net.with_layers(layers)
