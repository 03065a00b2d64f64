import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qflow.envs2d import gen_dataset
from qflow.estimator import FlowPolicyEstimator

SMALL = dict(policy_hidden=(16,), value_hidden=(16,), n_flow_steps=4, bc_steps=30, steps=10, batch_size=64)


def test_params_roundtrip():
    est = FlowPolicyEstimator(method="fbrac", alpha=0.5)
    params = est.get_params()
    assert params["method"] == "fbrac" and params["alpha"] == 0.5
    assert clone(est).get_params() == params


def test_fit_sample_predict():
    ds = gen_dataset("moons", 500)
    est = FlowPolicyEstimator(**SMALL).fit(ds.actions, ds.rewards)
    x = est.sample(20, random_state=0)
    assert x.shape == (20, 2)
    assert np.array_equal(x, est.sample(20, random_state=0))
    assert est.predict(ds.actions[:7]).shape == (7,)
    with pytest.raises(ValueError):
        est.predict(np.ones((3, 3)))


def test_validation():
    est = FlowPolicyEstimator(**SMALL)
    with pytest.raises(NotFittedError):
        est.sample(3)
    with pytest.raises(ValueError):
        est.fit(np.ones((5, 3)), np.ones(5))
    with pytest.raises(ValueError):
        est.fit(np.array([[0.0, np.nan]]), [1.0])
    with pytest.raises(KeyError):
        FlowPolicyEstimator(extra={"nope": 1}).fit(np.zeros((4, 2)), np.zeros(4))
