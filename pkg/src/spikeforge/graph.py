"""Layer/network descriptions, the LocNet and CAE builders, the rate-based
forward pass, and the training losses."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .neuron import NeuronParams, lif_rate_gradient, rectified_linear, soft_lif
from .tensor import ShapeError, Tensor

LAYER_KINDS = ("conv", "pool_conv", "avg_pool", "deconv", "dense")
ANN_NEURONS = ("soft_lif", "relu", "linear")
SNN_NEURONS = ("lif", "spiking_relu", "linear")
SPIKING_COUNTERPART = {"soft_lif": "lif", "relu": "spiking_relu"}
RATE_COUNTERPART = {v: k for k, v in SPIKING_COUNTERPART.items()}

LOCNET_NEURON = NeuronParams(amplitude=0.01)
CAE_NEURON = NeuronParams()


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    neuron: str = "linear"
    params: NeuronParams = field(default_factory=NeuronParams)
    kernel: int = 0
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.neuron not in ANN_NEURONS + SNN_NEURONS:
            raise ValueError(f"unknown neuron kind {self.neuron!r}")

    @property
    def has_weights(self) -> bool:
        return self.kind != "avg_pool"

    @property
    def is_spiking(self) -> bool:
        return self.neuron in ("lif", "spiking_relu")

    @property
    def has_neurons(self) -> bool:
        return self.neuron != "linear"

    @property
    def n_neurons(self) -> int:
        return int(np.prod(self.out_shape))

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind in ("conv", "pool_conv"):
            return {"W": (self.out_shape[0], self.in_shape[0], self.kernel, self.kernel),
                    "b": (self.out_shape[0],)}
        if self.kind == "deconv":
            return {"W": (self.in_shape[0], self.out_shape[0], self.kernel, self.kernel),
                    "b": (self.out_shape[0],)}
        if self.kind == "dense":
            return {"W": (self.out_shape[0], int(np.prod(self.in_shape))), "b": (self.out_shape[0],)}
        return {}


def _expected_out_shape(layer: LayerSpec) -> tuple[int, ...]:
    c, *hw = layer.in_shape
    k, s = layer.kernel, layer.stride
    if layer.kind in ("conv", "pool_conv"):
        if layer.padding == "same":
            h, w = [(d - 1) // s + 1 for d in hw]
        else:
            h, w = [(d - k) // s + 1 for d in hw]
        return (layer.out_shape[0], h, w)
    if layer.kind == "deconv":
        h, w = [(d - 1) * s + k for d in hw]
        return (layer.out_shape[0], h, w)
    if layer.kind == "avg_pool":
        if hw[0] % k or hw[1] % k:
            raise ShapeError(f"avg_pool window {k} does not divide {tuple(hw)}")
        return (c, hw[0] // k, hw[1] // k)
    return (layer.out_shape[0],)


@dataclass
class NetworkSpec:
    """Ordered layers plus their weights; ``mode`` is ``"ann"`` or ``"snn"``."""

    layers: tuple[LayerSpec, ...]
    weights: list[dict[str, np.ndarray]]
    mode: str = "ann"
    synapse: float | None = None
    task: str = "locnet"
    stage: str = "ann"

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("ann", "snn"):
            raise ValueError(f"mode must be 'ann' or 'snn', got {self.mode!r}")
        if len(self.weights) != len(self.layers):
            raise ShapeError("one weight dict per layer required")
        for i, layer in enumerate(self.layers):
            if i and self.layers[i - 1].out_shape != layer.in_shape:
                raise ShapeError(f"layer {i} input {layer.in_shape} != previous output "
                                 f"{self.layers[i - 1].out_shape}")
            if _expected_out_shape(layer) != layer.out_shape:
                raise ShapeError(f"layer {i} ({layer.kind}) output shape {layer.out_shape} "
                                 f"inconsistent with {_expected_out_shape(layer)}")
            shapes = layer.weight_shapes()
            got = {k: tuple(v.shape) for k, v in self.weights[i].items()}
            if got != shapes:
                raise ShapeError(f"layer {i} weights {got} != expected {shapes}")
            allowed = SNN_NEURONS if self.mode == "snn" else ANN_NEURONS
            if layer.neuron not in allowed:
                raise ValueError(f"layer {i} neuron {layer.neuron!r} not valid in {self.mode} mode")
            last = i == len(self.layers) - 1
            if self.mode == "snn" and layer.has_weights and not last and not layer.is_spiking:
                raise ValueError(f"layer {i} must be spiking in snn mode")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape

    def neuron_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.has_neurons]

    def copy(self) -> "NetworkSpec":
        return NetworkSpec(self.layers, copy.deepcopy(self.weights), self.mode, self.synapse,
                           self.task, self.stage)

    def with_layers(self, layers: Sequence[LayerSpec], **changes) -> "NetworkSpec":
        fields = dict(layers=tuple(layers), weights=copy.deepcopy(self.weights), mode=self.mode,
                      synapse=self.synapse, task=self.task, stage=self.stage)
        fields.update(changes)
        return NetworkSpec(**fields)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _glorot(rng: np.random.Generator, shape: tuple[int, ...], kind: str) -> np.ndarray:
    if kind == "dense":
        fan_out, fan_in = shape
    else:
        rf = shape[2] * shape[3]
        a, b = shape[0] * rf, shape[1] * rf
        fan_out, fan_in = (b, a) if kind == "deconv" else (a, b)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_weights(layers: Sequence[LayerSpec], seed: int = 0) -> list[dict[str, np.ndarray]]:
    """Glorot-uniform kernels; LIF layers get biases of 2*v_th so they start firing."""
    rng = np.random.default_rng(seed)
    weights = []
    for layer in layers:
        shapes = layer.weight_shapes()
        if not shapes:
            weights.append({})
            continue
        lif = layer.neuron in ("soft_lif", "lif")
        bias_value = 2.0 * layer.params.v_th if lif else 0.0
        # undo the rate function's slope at the operating point so signals neither
        # shrink nor blow up through deep stacks
        gain = 1.0 / float(lif_rate_gradient(bias_value, layer.params)) if lif else 1.0
        weights.append({"W": gain * _glorot(rng, shapes["W"], layer.kind),
                        "b": np.full(shapes["b"], bias_value, dtype=np.float32)})
    return weights


def _chain(specs: list[dict]) -> list[LayerSpec]:
    layers = []
    for spec in specs:
        in_shape = layers[-1].out_shape if layers else spec.pop("in_shape")
        out_ch = spec.pop("out", None)
        stub = LayerSpec(in_shape=in_shape, out_shape=(out_ch or in_shape[0],), **spec)
        out_shape = _expected_out_shape(stub)
        layers.append(replace(stub, out_shape=out_shape))
    return layers


def build_locnet(input_shape=(1, 64, 64), channels=(16, 32, 64), dense_units=(256, 64, 16, 4),
                 params: NeuronParams = LOCNET_NEURON, seed: int = 0) -> NetworkSpec:
    """Three (conv, stride-2 conv) stages followed by dense layers ending in 4 linear outputs."""
    c, h, w = input_shape
    if h % 8 or w % 8:
        raise ShapeError(f"LocNet input {h}x{w} must be divisible by 8")
    if len(channels) != 3:
        raise ValueError("LocNet needs exactly three channel widths")
    if dense_units[-1] != 4:
        raise ValueError("LocNet must end with 4 box coordinates")
    specs: list[dict] = []
    for i, ch in enumerate(channels):
        conv = dict(kind="conv", out=ch, kernel=3, stride=1, padding="same",
                    neuron="soft_lif", params=params)
        if i == 0:
            conv["in_shape"] = tuple(input_shape)
        specs.append(conv)
        specs.append(dict(kind="pool_conv", out=ch, kernel=2, stride=2, padding="valid",
                          neuron="soft_lif", params=params))
    for k, units in enumerate(dense_units):
        last = k == len(dense_units) - 1
        specs.append(dict(kind="dense", out=units, neuron="linear" if last else "soft_lif",
                          params=params))
    layers = _chain(specs)
    return NetworkSpec(layers, init_weights(layers, seed), mode="ann", task="locnet")


def build_cae(input_shape=(1, 32, 32), channels=(16, 32), params: NeuronParams = CAE_NEURON,
              seed: int = 0) -> NetworkSpec:
    """Convolutional autoencoder with 10 conv/deconv layers and no skip connections.

    Encoder: two conv pairs each followed by 2x2 average pooling, then a
    bottleneck conv. Decoder: two (stride-2 deconv, conv) pairs, then a linear
    conv producing one logit per pixel.
    """
    c, h, w = input_shape
    if c != 1:
        raise ShapeError("CAE expects single-channel input")
    if h % 4 or w % 4:
        raise ShapeError(f"CAE input {h}x{w} must be divisible by 4")
    c1, c2 = channels
    conv = dict(kind="conv", kernel=3, stride=1, padding="same", neuron="relu", params=params)
    pool = dict(kind="avg_pool", kernel=2, stride=2, neuron="linear", params=params)
    deconv = dict(kind="deconv", kernel=2, stride=2, neuron="relu", params=params)
    specs = [
        dict(conv, out=c1, in_shape=tuple(input_shape)), dict(conv, out=c1), dict(pool),
        dict(conv, out=c2), dict(conv, out=c2), dict(pool),
        dict(conv, out=c2),
        dict(deconv, out=c2), dict(conv, out=c1),
        dict(deconv, out=c1), dict(conv, out=c1),
        dict(conv, out=1, neuron="linear"),
    ]
    layers = _chain(specs)
    return NetworkSpec(layers, init_weights(layers, seed), mode="ann", task="cae")


# ---------------------------------------------------------------------------
# rate-based forward pass
# ---------------------------------------------------------------------------

def layer_current(layer: LayerSpec, w: dict, x: Tensor) -> Tensor:
    """Synaptic input (weighted sum) of ``layer`` for a batched input ``x``."""
    if layer.kind in ("conv", "pool_conv"):
        return T.conv2d(x, w["W"], stride=layer.stride, padding=layer.padding, bias=w["b"])
    if layer.kind == "deconv":
        return T.conv2d_transpose(x, w["W"], stride=layer.stride, bias=w["b"])
    if layer.kind == "avg_pool":
        return T.avg_pool2d(x, layer.kernel)
    if x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    return T.dense(x, w["W"], w["b"])


def activate(layer: LayerSpec, current: Tensor) -> Tensor:
    """Rate-function output; spiking kinds use their smooth counterparts."""
    kind = RATE_COUNTERPART.get(layer.neuron, layer.neuron)
    if kind == "soft_lif":
        return soft_lif(current, layer.params)
    if kind == "relu":
        return rectified_linear(current, layer.params)
    return current


def rate_hz(layer: LayerSpec, activity: Tensor) -> Tensor:
    """Convert a layer's rate-function output into firing rate in Hz."""
    return activity * (layer.params.scale / layer.params.amplitude)


def as_tensors(net: NetworkSpec, requires_grad: bool = True) -> list[dict[str, Tensor]]:
    return [{k: Tensor(v, requires_grad=requires_grad) for k, v in w.items()} for w in net.weights]


def forward(net: NetworkSpec, x, weights: list[dict[str, Tensor]] | None = None,
            return_rates: bool = False):
    """Rate-based (ANN) forward pass on a batch ``x`` of shape (N, C, H, W).

    With ``return_rates`` also returns per-layer firing rates in Hz for every
    layer that has neurons, as a list of ``(layer_index, Tensor)`` pairs.
    """
    if weights is None:
        weights = as_tensors(net, requires_grad=False)
    h = T.ensure_tensor(x)
    if h.shape[1:] != net.input_shape:
        if h.shape == net.input_shape:
            h = h.reshape((1,) + h.shape)
        else:
            raise ShapeError(f"input shape {h.shape} does not match network input {net.input_shape}")
    rates = []
    for i, layer in enumerate(net.layers):
        h = activate(layer, layer_current(layer, weights[i], h))
        if return_rates and layer.has_neurons:
            rates.append((i, rate_hz(layer, h)))
    return (h, rates) if return_rates else h


def predict(net: NetworkSpec, x, batch_size: int = 64) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    outs = [forward(net, x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    pred = T.ensure_tensor(pred)
    target = T.ensure_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def bce_dice_loss(logits, mask, w_bce: float = 0.5, w_dice: float = 0.5,
                  smooth: float = 1.0) -> Tensor:
    """Weighted BCE-with-logits plus soft Dice loss.

    For batched (N, ...) inputs with ndim 4 the Dice term is computed per
    sample and averaged.
    """
    logits = T.ensure_tensor(logits)
    mask = T.ensure_tensor(mask, logits.dtype)
    if logits.shape != mask.shape:
        raise ShapeError(f"bce_dice_loss: logits {logits.shape} vs mask {mask.shape}")
    bce = (T.softplus(logits) - logits * mask).mean()
    p = T.sigmoid(logits)
    axis = tuple(range(1, logits.ndim)) if logits.ndim == 4 else None
    inter = (p * mask).sum(axis)
    denom = p.sum(axis) + mask.sum(axis) + smooth
    dice = 1.0 - ((inter * 2.0 + smooth) * T.power(denom, -1.0)).mean()
    return bce * w_bce + dice * w_dice


@dataclass(frozen=True)
class RateRegConfig:
    target_hz: float = 250.0
    weights: tuple[float, ...] = ()

    @classmethod
    def for_layers(cls, n_layers: int, target_hz: float = 250.0, output_weight: float = 1.0,
                   hidden_weight: float = 0.01) -> "RateRegConfig":
        """The last regularized layer gets ``output_weight``; earlier ones ``hidden_weight``."""
        return cls(target_hz, tuple([hidden_weight] * (n_layers - 1) + [output_weight]))


def rate_regularization(layer_rates: Sequence, cfg: RateRegConfig) -> Tensor:
    """``sum_l w_l * mean((rate - target)^2)`` over per-neuron rates in Hz."""
    if len(layer_rates) != len(cfg.weights):
        raise ValueError(f"{len(layer_rates)} layer rates but {len(cfg.weights)} weights")
    total = None
    for rates, w in zip(layer_rates, cfg.weights):
        r = T.ensure_tensor(rates, np.float64 if not isinstance(rates, Tensor) else None)
        d = r - cfg.target_hz
        term = (d * d).mean() * float(w)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def per_neuron_rates(rates: Tensor) -> Tensor:
    """Average batched rates over the batch axis, keeping one value per neuron."""
    return rates.mean(axis=0) if rates.ndim > 1 else rates
