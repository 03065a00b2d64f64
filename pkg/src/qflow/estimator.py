"""scikit-learn style wrapper around one training run on a 2D bandit dataset."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .trainers import Learner, TrainConfig, phase_steps, train
from .values import q_value

__all__ = ["FlowPolicyEstimator"]


class FlowPolicyEstimator(RegressorMixin, BaseEstimator):
    """Fit a flow policy and critic to ``(actions, rewards)``.

    ``X`` holds 2D actions and ``y`` their rewards. After ``fit``,
    :meth:`sample` draws actions from the trained policy and :meth:`predict`
    returns the critic's estimate of the reward at ``X``.

    Parameters mirror :class:`TrainConfig`; anything not listed can be passed
    through ``extra``.
    """

    def __init__(self, method="qflow", lam=1.0, alpha=1.0, beta=1.0, bc_epochs=2000, rl_epochs=100,
                 bc_steps=None, steps=None, batch_size=256, profile="2d", policy_hidden=None, value_hidden=None,
                 n_flow_steps=None, random_state=0, extra=None):
        self.method = method
        self.lam = lam
        self.alpha = alpha
        self.beta = beta
        self.bc_epochs = bc_epochs
        self.rl_epochs = rl_epochs
        self.bc_steps = bc_steps
        self.steps = steps
        self.batch_size = batch_size
        self.profile = profile
        self.policy_hidden = policy_hidden
        self.value_hidden = value_hidden
        self.n_flow_steps = n_flow_steps
        self.random_state = random_state
        self.extra = extra

    def _config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        kw = {k: v for k, v in self.get_params().items() if k in names}
        kw["seed"] = int(self.random_state)
        kw.update(self.extra or {})
        return TrainConfig.from_dict(kw)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if X.shape[1] != 2:
            raise ValueError(f"expected 2D actions, got {X.shape[1]} columns")
        cfg = self._config().resolved()
        ds = _ArrayData(X, y)
        bc, rl = phase_steps(cfg, len(X))
        self.learner_ = train(Learner(cfg), ds, bc, rl)
        self.n_features_in_ = 2
        return self

    def sample(self, n_samples: int, random_state=None) -> np.ndarray:
        check_is_fitted(self, "learner_")
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        rng = np.random.default_rng(random_state)
        return self.learner_.sample(n_samples, rng)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "learner_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return q_value(self.learner_.critic, np.zeros((len(X), 0)), X)


class _ArrayData:
    """Just enough of a dataset for :func:`train`."""

    def __init__(self, actions, rewards):
        self.actions = actions
        self.rewards = rewards

    def __len__(self):
        return len(self.actions)
