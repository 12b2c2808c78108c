import numpy as np
import pytest

from spikeforge.graph import RateRegConfig, as_tensors, build_locnet, forward, per_neuron_rates
from spikeforge.neuron import NeuronParams
from spikeforge.sim import InvalidStateError, SimConfig
from spikeforge.train import (TrainConfig, TrainingDivergedError, ann_loss, convert, early_stop,
                              evaluate_hybrid_loss, hybrid_finetune, hybrid_loss, train_ann)

from nets import dense_net, toy_relu_net

LIF = NeuronParams(amplitude=0.01)


def _regression(n=64, seed=0, dim=8, out=4):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, dim)).astype(np.float32)
    y = (x @ rng.uniform(-0.5, 0.5, (dim, out)) + 0.3).astype(np.float32)
    return x, y


def _lif_net(seed=0, sizes=(8, 12, 4)):
    net = dense_net(list(sizes), "soft_lif", LIF, seed=seed)
    for w, layer in zip(net.weights, net.layers):
        if layer.has_neurons:
            w["W"] *= 0.5
            w["b"][:] = 2.0
        else:
            w["W"] *= 50.0
    return net


def _same_weights(a, b):
    return all(np.array_equal(wa[k], wb[k]) for wa, wb in zip(a.weights, b.weights) for k in wa)


# -- config ---------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(lr=-1.0), dict(loss="l1"),
                                    dict(batch_size=0), dict(patience=0)])
def test_train_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# -- early stopping ---------------------------------------------------------

def test_early_stop_examples():
    assert early_stop([5.0, 4.0, 3.0, 2.0], patience=2) == 3
    assert early_stop([1.0, 0.5, 0.6, 0.7, 0.8], patience=2) == 1
    assert early_stop([1.0, 1.0, 1.0], patience=1) == 0


def test_early_stop_ignores_tiny_improvements():
    assert early_stop([1.0, 0.99995, 0.99992, 0.99991], patience=3) == 0


def test_early_stop_needs_history():
    with pytest.raises(ValueError):
        early_stop([], patience=3)


# -- ANN training -------------------------------------------------------------

def test_train_ann_lr_zero_is_identity():
    net = toy_relu_net()
    out, history = train_ann(net, _regression(), TrainConfig(epochs=1, lr=0.0))
    assert _same_weights(out, net)
    assert len(history) == 1


def test_train_ann_does_not_mutate_input():
    net = toy_relu_net()
    before = [{k: v.copy() for k, v in w.items()} for w in net.weights]
    train_ann(net, _regression(), TrainConfig(epochs=2, lr=0.01))
    assert all(np.array_equal(b[k], w[k]) for b, w in zip(before, net.weights) for k in w)


def test_train_ann_reduces_loss():
    data = _regression(128)
    _, history = train_ann(toy_relu_net(), data, TrainConfig(epochs=15, lr=0.01, patience=None))
    assert history[-1]["train_loss"] < 0.3 * history[0]["train_loss"]


def test_train_ann_is_reproducible():
    cfg = TrainConfig(epochs=2, lr=0.01, seed=5)
    a, ha = train_ann(toy_relu_net(), _regression(), cfg)
    b, hb = train_ann(toy_relu_net(), _regression(), cfg)
    assert _same_weights(a, b) and ha == hb


def test_train_ann_aborts_on_nan():
    x, y = _regression()
    x[3, 0] = np.nan
    with pytest.raises(TrainingDivergedError, match="epoch 0"):
        train_ann(toy_relu_net(), (x, y), TrainConfig(epochs=1, batch_size=64))


def test_train_ann_rejects_snn():
    with pytest.raises(InvalidStateError):
        train_ann(convert(toy_relu_net()), _regression(), TrainConfig(epochs=1))


def test_early_stopping_restores_best_epoch():
    x, y = _regression(64)
    # validation targets unrelated to training ones: val loss soon gets worse
    xv, yv = _regression(32, seed=9)
    cfg = TrainConfig(epochs=30, lr=0.05, patience=2)
    net, history = train_ann(toy_relu_net(), (x, y), cfg, validation=(xv, -yv))
    losses = [h["val_loss"] for h in history]
    assert len(history) < 30
    assert losses[-1] == min(losses)


def test_rate_regularization_pulls_rates_to_target():
    net = dense_net([16, 32, 2], "soft_lif", LIF, seed=0)
    for w in net.weights:
        w["b"][:] = 1.5
    x, y = _regression(128, dim=16, out=2)
    reg = RateRegConfig.for_layers(1, 250.0, output_weight=0.01)
    cfg = TrainConfig(epochs=40, lr=0.01, rate_reg=reg, patience=None)
    trained, _ = train_ann(net, (x, y), cfg)
    _, rates = forward(trained, x, return_rates=True)
    assert 175.0 <= float(rates[0][1].data.mean()) <= 325.0


# -- conversion ---------------------------------------------------------------

def test_convert_keeps_weights_bit_identical():
    ann = build_locnet()
    snn = convert(ann)
    assert snn.mode == "snn" and snn.synapse == 0.005 and snn.stage == "converted"
    assert _same_weights(ann, snn)
    assert ann.mode == "ann"
    assert [l.neuron for l in snn.layers[:-1]] == ["lif"] * 9
    assert snn.layers[-1].neuron == "linear"


def test_convert_maps_relu_to_spiking_relu():
    snn = convert(toy_relu_net(), scale=1000.0)
    assert snn.layers[0].neuron == "spiking_relu"
    assert snn.layers[0].params.scale == 1000.0


def test_convert_rejects_converted_network():
    with pytest.raises(InvalidStateError, match="already converted"):
        convert(convert(toy_relu_net()))


# -- hybrid fine-tuning ---------------------------------------------------------

HYB_SIM = SimConfig(n_steps=40, readout="mean_last_k", k=20)


def test_hybrid_rejects_ann_network():
    with pytest.raises(InvalidStateError):
        hybrid_finetune(_lif_net(), _regression(), TrainConfig(hybrid=True, sim=HYB_SIM))


def test_hybrid_requires_hybrid_flag():
    with pytest.raises(ValueError):
        hybrid_finetune(convert(_lif_net()), _regression(), TrainConfig(sim=HYB_SIM))


def test_hybrid_lr_zero_is_identity_and_matches_evaluation():
    snn = convert(_lif_net())
    data = _regression(64)
    cfg = TrainConfig(epochs=1, lr=0.0, hybrid=True, sim=HYB_SIM)
    out, history = hybrid_finetune(snn, data, cfg)
    assert _same_weights(out, snn)
    assert history[0]["train_loss"] == pytest.approx(evaluate_hybrid_loss(snn, *data, cfg),
                                                     rel=1e-6)


def test_hybrid_is_bit_reproducible():
    cfg = TrainConfig(epochs=2, lr=0.001, hybrid=True, sim=HYB_SIM, seed=3)
    data = _regression(48)
    a, ha = hybrid_finetune(convert(_lif_net()), data, cfg)
    b, hb = hybrid_finetune(convert(_lif_net()), data, cfg)
    assert _same_weights(a, b) and ha == hb


def test_hybrid_reduces_loss():
    snn = convert(_lif_net())
    data = _regression(64)
    cfg = TrainConfig(epochs=6, lr=0.003, hybrid=True, sim=HYB_SIM, patience=None)
    before = evaluate_hybrid_loss(snn, *data, cfg)
    out, _ = hybrid_finetune(snn, data, cfg)
    assert evaluate_hybrid_loss(out, *data, cfg) < before


def test_hybrid_value_is_the_spiking_readout():
    snn = convert(_lif_net())
    x, y = _regression(8)
    cfg = TrainConfig(hybrid=True, sim=HYB_SIM)
    loss, roll = hybrid_loss(snn, as_tensors(snn), x, y, cfg, None)
    assert loss.item() == pytest.approx(float(np.mean((roll.output - y) ** 2)), rel=1e-6)


def test_surrogate_gradient_approaches_rate_gradient():
    ann = _lif_net(seed=2)
    x, y = _regression(16)
    cfg = TrainConfig(hybrid=True, sim=SimConfig(n_steps=1000, readout="mean_last_k", k=500))
    params = as_tensors(ann)
    ann_loss(ann, params, x, y, cfg, None).backward()
    snn = convert(ann)
    hparams = as_tensors(snn)
    hybrid_loss(snn, hparams, x, y, cfg, None)[0].backward()
    for pa, ph in zip(params, hparams):
        for k in pa:
            ga, gh = pa[k].grad, ph[k].grad
            assert np.linalg.norm(gh - ga) < 0.1 * np.linalg.norm(ga), k


def test_hybrid_rate_regularization_uses_measured_rates():
    snn = convert(_lif_net())
    x, y = _regression(8)
    reg = RateRegConfig.for_layers(1, 250.0, output_weight=1.0)
    cfg = TrainConfig(hybrid=True, sim=HYB_SIM)
    plain, roll = hybrid_loss(snn, as_tensors(snn), x, y, cfg, None)
    with_reg, _ = hybrid_loss(snn, as_tensors(snn), x, y, cfg, reg)
    measured = per_neuron_rates(roll.neuron_spikes[0] / roll.record.duration)
    expected = float(np.mean((measured - 250.0) ** 2))
    assert with_reg.item() - plain.item() == pytest.approx(expected, rel=1e-4)
