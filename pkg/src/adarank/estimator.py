"""scikit-learn style wrapper: fit adapters on a frozen toy transformer.

``X`` and ``y`` are row-stacked sequences of ``seq_len`` tokens each, shape
``(n_sequences * seq_len, width)``. The frozen base model is either passed in
or drawn from ``base_seed``.
"""
from __future__ import annotations

from types import SimpleNamespace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .adapters import KINDS, ToyModel, predict
from .allocator import BudgetSchedule
from .errors import ConfigurationError, DimensionError
from .linalg_ad import make_rng
from .trainer import TrainConfig, run


class AdaptiveLowRankRegressor(RegressorMixin, BaseEstimator):
    """Adaptive low-rank fine-tuning of a frozen toy transformer for regression targets.

    Parameters mirror :class:`~adarank.trainer.TrainConfig`; the budget
    schedule is given by ``b0``, ``bT``, ``ti``, ``tf`` and ``n_steps``.

    Attributes set by ``fit``: ``model_`` (adapted model), ``result_``
    (:class:`~adarank.trainer.RunResult`), ``rank_allocation_``
    (layers x 6 array of final active ranks), ``n_features_in_``.
    """

    def __init__(self, base_model=None, seq_len=8, layers=4, heads=4, ffn_width=64, base_seed=0,
                 mode="AdaLoRA", variant="SmoothedSensitivity", b0=96, bT=64, ti=300, tf=600,
                 n_steps=3000, eta=1e-2, gamma=0.1, beta1=0.85, beta2=0.85, delta_t=10,
                 batch_size=8, seed=0):
        self.base_model = base_model
        self.seq_len = seq_len
        self.layers = layers
        self.heads = heads
        self.ffn_width = ffn_width
        self.base_seed = base_seed
        self.mode = mode
        self.variant = variant
        self.b0 = b0
        self.bT = bT
        self.ti = ti
        self.tf = tf
        self.n_steps = n_steps
        self.eta = eta
        self.gamma = gamma
        self.beta1 = beta1
        self.beta2 = beta2
        self.delta_t = delta_t
        self.batch_size = batch_size
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(eta=self.eta, gamma=self.gamma, beta1=self.beta1, beta2=self.beta2,
                           delta_t=self.delta_t, mode=self.mode, variant=self.variant,
                           batch_size=self.batch_size, seed=self.seed,
                           schedule=BudgetSchedule(self.b0, self.bT, self.ti, self.tf, self.n_steps)).validate()

    def _check_rows(self, X):
        if X.shape[0] % self.seq_len:
            raise DimensionError(f"{X.shape[0]} rows is not a multiple of seq_len={self.seq_len}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        self._check_rows(X)
        if self.base_model is not None:
            base = self.base_model.copy_base()
        else:
            base = ToyModel.random(self.layers, X.shape[1], self.heads, self.ffn_width, make_rng(self.base_seed))
        if base.width != X.shape[1] or y.shape[1] != base.width:
            raise DimensionError(f"model width {base.width} does not match X {X.shape} / y {y.shape}")
        config = self._config()
        task = SimpleNamespace(base=base, x_train=X, y_train=y, x_test=X, y_test=y,
                               seq_len=self.seq_len, kind="regression")
        self.result_ = run(config, task)
        if self.result_.aborted:
            raise ConfigurationError(f"training aborted: {self.result_.aborted}")
        self.model_ = self.result_.model
        ranks = np.array(self.result_.history[-1].active_ranks, dtype=int)
        self.rank_allocation_ = ranks.reshape(-1, len(KINDS))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"X has {X.shape[1]} features, model expects {self.n_features_in_}")
        self._check_rows(X)
        return predict(self.model_, X, self.seq_len)
