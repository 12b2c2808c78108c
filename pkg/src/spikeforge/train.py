"""The three pipeline stages: rate-based training, conversion to spiking
neurons, and hybrid fine-tuning (spiking forward, smooth backward)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .graph import (SPIKING_COUNTERPART, NetworkSpec, RateRegConfig, activate, as_tensors,
                    bce_dice_loss, forward, layer_current, mse_loss, per_neuron_rates, rate_hz,
                    rate_regularization)
from .sim import InvalidStateError, SimConfig, apply_post_training_scaling, simulate
from .tensor import Adam, Tensor

logger = logging.getLogger(__name__)

LOSSES = {"mse": mse_loss, "bce_dice": bce_dice_loss}
DEFAULT_SYNAPSE = 0.005


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.01
    loss: str = "mse"
    rate_reg: RateRegConfig | None = None
    scale: float | None = None
    hybrid: bool = False
    sim: SimConfig = field(default_factory=lambda: SimConfig(n_steps=50))
    patience: int | None = 3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

def _early_stop(history, patience: int, min_delta: float = 1e-4) -> tuple[int, bool]:
    best, best_epoch, wait = float("inf"), 0, 0
    for e, value in enumerate(history):
        if value < best - min_delta:
            best, best_epoch, wait = value, e, 0
        else:
            wait += 1
            if wait >= patience:
                return best_epoch, True
    return len(history) - 1, False


def early_stop(history, patience: int, min_delta: float = 1e-4) -> int:
    """Epoch to keep: the best epoch once ``patience`` epochs pass without an
    improvement larger than ``min_delta``; the last epoch if that never happens."""
    if len(history) == 0:
        raise ValueError("early_stop needs a nonempty history")
    return _early_stop(history, patience, min_delta)[0]


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check_finite(loss: Tensor, epoch: int, batch: int) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingDivergedError(f"loss became {loss.item()} at epoch {epoch}, batch {batch}")


def _reg_config(net: NetworkSpec, cfg: RateRegConfig) -> RateRegConfig:
    n = len(net.neuron_layers())
    if cfg.weights:
        return cfg
    return RateRegConfig.for_layers(n, cfg.target_hz)


def _write_back(net: NetworkSpec, params: list[dict[str, Tensor]]) -> None:
    for w, p in zip(net.weights, params):
        for k in w:
            w[k] = p[k].data


def _flat(params: list[dict[str, Tensor]]) -> list[Tensor]:
    return [t for layer in params for t in layer.values()]


def ann_loss(net: NetworkSpec, params, x, y, cfg: TrainConfig, reg: RateRegConfig | None):
    out, rates = forward(net, x, params, return_rates=True)
    loss = LOSSES[cfg.loss](out, y)
    if reg is not None:
        loss = loss + rate_regularization([per_neuron_rates(r) for _, r in rates], reg)
    return loss


def evaluate_ann_loss(net: NetworkSpec, x, y, cfg: TrainConfig) -> float:
    params = as_tensors(net, requires_grad=False)
    reg = _reg_config(net, cfg.rate_reg) if cfg.rate_reg else None
    total = 0.0
    for i in range(0, len(x), 64):
        xb, yb = x[i:i + 64], y[i:i + 64]
        total += ann_loss(net, params, xb, yb, cfg, reg).item() * len(xb)
    return total / len(x)


# ---------------------------------------------------------------------------
# stage 1: rate-based training
# ---------------------------------------------------------------------------

def train_ann(net: NetworkSpec, data, cfg: TrainConfig, validation=None):
    """Minibatch Adam on the task loss (plus rate regularization if configured).

    ``data`` and ``validation`` are ``(inputs, targets)`` pairs. Returns a new
    network and a per-epoch history of ``{"epoch", "train_loss", "val_loss"}``.
    """
    if net.mode != "ann":
        raise InvalidStateError("train_ann needs an ann-mode network")
    net = net.copy()
    if cfg.scale is not None:
        net = apply_post_training_scaling(net, cfg.scale)
    x, y = (np.asarray(a, dtype=np.float32) for a in data)
    reg = _reg_config(net, cfg.rate_reg) if cfg.rate_reg else None
    params = as_tensors(net)
    opt = Adam(_flat(params), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history, snapshots = [], []
    for epoch in range(cfg.epochs):
        losses = []
        for b, idx in enumerate(_batches(len(x), cfg.batch_size, rng)):
            opt.zero_grad()
            loss = ann_loss(net, params, x[idx], y[idx], cfg, reg)
            _check_finite(loss, epoch, b)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        _write_back(net, params)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if validation is not None:
            entry["val_loss"] = evaluate_ann_loss(net, *validation, cfg)
        history.append(entry)
        logger.info("ann epoch %d: %s", epoch, entry)
        if _maybe_stop(history, snapshots, net, cfg):
            break
    return net, history


def _maybe_stop(history, snapshots, net: NetworkSpec, cfg: TrainConfig) -> bool:
    if cfg.patience is None or "val_loss" not in history[-1]:
        return False
    snapshots.append([{k: v.copy() for k, v in w.items()} for w in net.weights])
    stop, triggered = _early_stop([h["val_loss"] for h in history], cfg.patience)
    if triggered:
        net.weights[:] = snapshots[stop]
        del history[stop + 1:]
    return triggered


# ---------------------------------------------------------------------------
# stage 2: conversion
# ---------------------------------------------------------------------------

def convert(net: NetworkSpec, synapse: float | None = DEFAULT_SYNAPSE,
            scale: float | None = None) -> NetworkSpec:
    """Swap every rate neuron for its spiking counterpart; weights are copied untouched."""
    if net.mode != "ann":
        raise InvalidStateError("network is already converted")
    layers = []
    for layer in net.layers:
        if layer.neuron == "linear":
            layers.append(layer)
        elif layer.neuron in SPIKING_COUNTERPART:
            layers.append(replace(layer, neuron=SPIKING_COUNTERPART[layer.neuron]))
        else:
            raise ValueError(f"neuron kind {layer.neuron!r} has no spiking counterpart")
    out = net.with_layers(layers, mode="snn", synapse=synapse, stage="converted")
    if scale is not None:
        out = apply_post_training_scaling(out, scale)
    return out


# ---------------------------------------------------------------------------
# stage 3: hybrid fine-tuning
# ---------------------------------------------------------------------------

def hybrid_loss(net: NetworkSpec, params, x, y, cfg: TrainConfig, reg: RateRegConfig | None):
    """Loss whose value comes from a spiking rollout and whose gradient comes
    from the smooth rate functions.

    Every spiking layer is re-evaluated with its rate function at its
    time-averaged input current; a straight-through node then swaps in the
    value the spiking run actually produced.
    """
    roll = simulate(net, x, cfg.sim, keep_means=True)
    h = T.ensure_tensor(x)
    rates = []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        current = layer_current(layer, params[i], h)
        if layer.is_spiking:
            smooth = activate(layer, current)
            h = T.straight_through(smooth, roll.signal_means[i])
            if reg is not None:
                measured = roll.neuron_spikes[i] / roll.record.duration
                r = T.straight_through(rate_hz(layer, smooth), measured)
                rates.append(per_neuron_rates(r))
        elif i == last:
            h = T.straight_through(current, roll.output)
        else:
            h = current
    loss = LOSSES[cfg.loss](h, y)
    if reg is not None:
        loss = loss + rate_regularization(rates, reg)
    return loss, roll


def evaluate_hybrid_loss(net: NetworkSpec, x, y, cfg: TrainConfig) -> float:
    params = as_tensors(net, requires_grad=False)
    reg = _reg_config(net, cfg.rate_reg) if cfg.rate_reg else None
    total = 0.0
    for i in range(0, len(x), 32):
        xb, yb = x[i:i + 32], y[i:i + 32]
        total += hybrid_loss(net, params, xb, yb, cfg, reg)[0].item() * len(xb)
    return total / len(x)


def hybrid_finetune(net: NetworkSpec, data, cfg: TrainConfig, validation=None):
    """Fine-tune a converted network with spiking forward / smooth backward passes."""
    if net.mode != "snn":
        raise InvalidStateError("hybrid fine-tuning needs a converted (snn-mode) network")
    if not cfg.hybrid:
        raise ValueError("TrainConfig.hybrid must be set for hybrid fine-tuning")
    net = net.copy()
    if cfg.scale is not None:
        net = apply_post_training_scaling(net, cfg.scale)
    x, y = (np.asarray(a, dtype=np.float32) for a in data)
    reg = _reg_config(net, cfg.rate_reg) if cfg.rate_reg else None
    params = as_tensors(net)
    opt = Adam(_flat(params), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history, snapshots = [], []
    for epoch in range(cfg.epochs):
        losses = []
        for b, idx in enumerate(_batches(len(x), cfg.batch_size, rng)):
            opt.zero_grad()
            loss, _ = hybrid_loss(net, params, x[idx], y[idx], cfg, reg)
            _check_finite(loss, epoch, b)
            loss.backward()
            opt.step()
            # the next rollout must see the updated weights
            _write_back(net, params)
            losses.append(loss.item())
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if validation is not None:
            entry["val_loss"] = evaluate_hybrid_loss(net, *validation, cfg)
        history.append(entry)
        logger.info("hybrid epoch %d: %s", epoch, entry)
        if _maybe_stop(history, snapshots, net, cfg):
            break
    net.stage = "hybrid"
    return net, history
