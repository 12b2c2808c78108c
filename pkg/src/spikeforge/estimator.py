"""scikit-learn style wrapper around the full three-stage pipeline."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig
from .data import Dataset
from .graph import predict as ann_predict
from .metrics import mean_metric, masks_from_logits
from .pipeline import Splits, build_network, stage_convert, stage_hybrid, stage_ann
from .sim import run_snn_batched

STAGES = ("ann", "converted", "hybrid")


class HybridSNNEstimator(BaseEstimator):
    """Trains an ANN, converts it to spiking neurons and fine-tunes the result.

    ``X`` holds images shaped (N, 1, H, W). ``y`` holds boxes (N, 4) for
    ``task="locnet"`` or binary masks (N, 1, H, W) for ``task="cae"``.
    ``None`` hyperparameters fall back to the task defaults of
    :class:`~spikeforge.config.RunConfig`. ``stage`` picks the network used
    by :meth:`predict` and :meth:`score`.
    """

    def __init__(self, task="locnet", ann_epochs=None, ann_lr=None, hybrid_epochs=None,
                 hybrid_lr=None, n_steps=None, eval_steps=None, scale=None, synapse=None,
                 validation_fraction=0.1, stage="hybrid", seed=0):
        self.task = task
        self.ann_epochs = ann_epochs
        self.ann_lr = ann_lr
        self.hybrid_epochs = hybrid_epochs
        self.hybrid_lr = hybrid_lr
        self.n_steps = n_steps
        self.eval_steps = eval_steps
        self.scale = scale
        self.synapse = synapse
        self.validation_fraction = validation_fraction
        self.stage = stage
        self.seed = seed

    def _run_config(self, size: int) -> RunConfig:
        cfg = RunConfig.defaults(self.task, self.seed)
        ann, hyb, conv, ev = cfg.ann, cfg.hybrid, cfg.convert, cfg.eval
        if self.ann_epochs is not None:
            ann = replace(ann, epochs=self.ann_epochs)
        if self.ann_lr is not None:
            ann = replace(ann, lr=self.ann_lr)
        if self.hybrid_epochs is not None:
            hyb = replace(hyb, epochs=self.hybrid_epochs)
        if self.hybrid_lr is not None:
            hyb = replace(hyb, lr=self.hybrid_lr)
        if self.n_steps is not None:
            hyb = replace(hyb, n_steps=self.n_steps, k=max(1, self.n_steps // 2))
        if self.eval_steps is not None:
            ev = replace(ev, n_steps=self.eval_steps, k=max(1, self.eval_steps // 2))
        if self.scale is not None:
            conv = replace(conv, scale=self.scale)
        if self.synapse is not None:
            conv = replace(conv, synapse=self.synapse)
        cfg = replace(cfg, ann=ann, hybrid=hyb, convert=conv, eval=ev,
                      data=replace(cfg.data, size=size))
        cfg.validate()
        return cfg

    def _check_X(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
        if X.ndim != 4 or X.shape[1] != 1 or X.shape[2] != X.shape[3]:
            raise ValueError(f"X must have shape (N, 1, S, S), got {X.shape}")
        return X

    def _check_y(self, y, n: int) -> np.ndarray:
        y = check_array(y, allow_nd=True, dtype=np.float32, ensure_2d=False)
        if len(y) != n:
            raise ValueError(f"X has {n} samples but y has {len(y)}")
        if self.task == "locnet" and (y.ndim != 2 or y.shape[1] != 4):
            raise ValueError(f"locnet targets must have shape (N, 4), got {y.shape}")
        if self.task == "cae" and y.ndim != 4:
            raise ValueError(f"cae targets must have shape (N, 1, H, W), got {y.shape}")
        return y

    def fit(self, X, y):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        X = self._check_X(X)
        y = self._check_y(y, len(X))
        cfg = self._run_config(X.shape[-1])
        order = np.random.default_rng(self.seed).permutation(len(X))
        n_val = max(1, int(round(self.validation_fraction * len(X))))
        train = Dataset(X[order[n_val:]], y[order[n_val:]])
        val = Dataset(X[order[:n_val]], y[order[:n_val]])
        splits = Splits(train, val, val)
        self.config_ = cfg
        self.ann_, self.ann_history_ = stage_ann(cfg, splits, build_network(cfg))
        self.converted_ = stage_convert(cfg, self.ann_)
        self.hybrid_, self.hybrid_history_ = stage_hybrid(cfg, splits, self.converted_)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def network(self, stage: str | None = None):
        check_is_fitted(self, "hybrid_")
        stage = stage or self.stage
        if stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
        return getattr(self, f"{stage}_")

    def decision_function(self, X, stage: str | None = None) -> np.ndarray:
        """Raw network outputs: boxes, or per-pixel logits for the CAE."""
        net = self.network(stage)
        X = self._check_X(X)
        if net.mode == "ann":
            return ann_predict(net, X)
        return run_snn_batched(net, X, self.config_.eval_sim())[0]

    def predict(self, X, stage: str | None = None) -> np.ndarray:
        out = self.decision_function(X, stage)
        return out if self.task == "locnet" else masks_from_logits(out).astype(np.float32)

    def score(self, X, y, stage: str | None = None) -> float:
        """Mean IoU (locnet) or Dice (cae)."""
        out = self.decision_function(X, stage)
        return mean_metric(self.task, out, self._check_y(y, len(out)))
