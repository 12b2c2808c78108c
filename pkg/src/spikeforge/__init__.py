"""Hybrid ANN-SNN co-training.

Rate-based networks built from smoothed LIF (or rectified-linear) neurons are
trained with gradient descent, converted to clock-driven spiking networks and
then fine-tuned with spiking forward passes and smooth backward passes.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import Dataset, gen_box_dataset, gen_mask_dataset, load_dataset, save_dataset, split
from .estimator import HybridSNNEstimator
from .graph import (LayerSpec, NetworkSpec, RateRegConfig, bce_dice_loss, build_cae, build_locnet,
                    forward, mse_loss, predict, rate_regularization)
from .metrics import EvalReport, dice, evaluate, iou
from .neuron import (LifState, NeuronParams, ReluState, SynapseState, lif_rate, lif_rate_gradient,
                     lif_spike_step, relu_rate, relu_spike_step, rho_hard, rho_soft, synapse_step)
from .sim import (InvalidStateError, SimConfig, SpikeRecord, apply_post_training_scaling,
                  average_firing_rate, run_snn)
from .tensor import Adam, AdamState, ShapeError, Tensor, adam_step
from .train import TrainConfig, convert, early_stop, hybrid_finetune, train_ann

__version__ = "0.1.0"
