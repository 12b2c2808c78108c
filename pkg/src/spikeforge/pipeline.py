"""Config-driven glue for the three-stage pipeline, shared by the CLI and the
estimator wrapper."""

from __future__ import annotations

from dataclasses import dataclass

from .config import RunConfig
from .data import Dataset, load_or_generate, split
from .graph import NetworkSpec, build_cae, build_locnet
from .metrics import EvalReport, evaluate
from .train import convert, hybrid_finetune, train_ann


@dataclass
class Splits:
    train: Dataset
    validation: Dataset
    test: Dataset


def generate(cfg: RunConfig) -> Dataset:
    d = cfg.data
    return load_or_generate(cfg.task, d.n_samples, cfg.seed, d.cache_dir, size=d.size,
                            noise=d.noise)


def make_splits(cfg: RunConfig, data: Dataset | None = None) -> Splits:
    """Seeded train/test split; the last tenth of the training part is held out
    for early stopping so the test set never steers training."""
    data = generate(cfg) if data is None else data
    if data.task != cfg.task:
        raise ValueError(f"{data.task} data given to a {cfg.task} run")
    train, test = split(data, cfg.data.train_fraction, cfg.seed)
    fit, val = split(train, 0.9, cfg.seed + 1)
    return Splits(fit, val, test)


def build_network(cfg: RunConfig) -> NetworkSpec:
    c, h, w = 1, cfg.data.size, cfg.data.size
    if cfg.task == "locnet":
        return build_locnet((c, h, w), cfg.network.channels, cfg.network.dense_units,
                            cfg.neuron_params(), seed=cfg.seed)
    return build_cae((c, h, w), cfg.network.channels, cfg.neuron_params(), seed=cfg.seed)


def stage_ann(cfg: RunConfig, splits: Splits, net: NetworkSpec | None = None):
    net = build_network(cfg) if net is None else net
    tc = cfg.ann_config(len(net.neuron_layers()))
    return train_ann(net, splits.train.arrays, tc, validation=splits.validation.arrays)


def stage_convert(cfg: RunConfig, net: NetworkSpec, synapse=None, scale=None) -> NetworkSpec:
    synapse = cfg.convert.synapse if synapse is None else synapse
    scale = cfg.convert.scale if scale is None else scale
    return convert(net, synapse=synapse, scale=scale)


def stage_hybrid(cfg: RunConfig, splits: Splits, net: NetworkSpec):
    tc = cfg.hybrid_config(len(net.neuron_layers()))
    return hybrid_finetune(net, splits.train.arrays, tc, validation=splits.validation.arrays)


def run_all(cfg: RunConfig, data: Dataset | None = None):
    """ANN training, conversion and hybrid fine-tuning, each evaluated on the
    test split. Returns ``(networks, reports, histories)`` keyed by stage."""
    splits = make_splits(cfg, data)
    ann, h_ann = stage_ann(cfg, splits)
    converted = stage_convert(cfg, ann)
    hybrid, h_hyb = stage_hybrid(cfg, splits, converted)
    nets = {"ann": ann, "converted": converted, "hybrid": hybrid}
    reports: dict[str, EvalReport] = {
        tag: evaluate(net, splits.test, cfg.eval_sim(), tag) for tag, net in nets.items()}
    return nets, reports, {"ann": h_ann, "hybrid": h_hyb}
