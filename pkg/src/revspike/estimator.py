"""Scikit-learn estimator wrapping the spiking classifier.

``SpikingClassifier`` follows the estimator contract (``get_params`` /
``set_params`` / ``fit`` / ``predict``), so it composes with pipelines,
``clone`` and grid search.  Features must already live in [0, 1]; they are
converted to spike times by the configured encoding before training.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import encode
from .network import ModelConfig, SpikingNetwork, forward_pass
from .training import CostParams, init_rc, init_ttfs, train_and_eval

__all__ = ["SpikingClassifier"]


class SpikingClassifier(BaseEstimator, ClassifierMixin):
    """Fully connected spiking-network classifier (earliest output spike wins).

    Parameters
    ----------
    hidden_layer_sizes : tuple
        Hidden widths, e.g. ``(100,)``.
    mode : {'rc_spike', 'ttfs'}
        Two-phase (accumulate then fire) or threshold-crossing neurons.
    e_rev : float
        Reversal-potential magnitude (symmetric); larger is closer to ideal.
    m_train, m_test : int
        Discretization steps used while training / scoring.
    train_offset : 'random' or float
        Grid-phase policy during training.
    encoding : {'invert', 'direct'}
        'invert' maps bright/large features to early spikes (t = 1 - x);
        'direct' maps t = x and appends an always-at-zero bias spike.
    learning_rate : float or None
        None selects the mode default (1e-4 two-phase, 2e-4 threshold).
    """

    def __init__(
        self,
        hidden_layer_sizes=(100,),
        mode="rc_spike",
        e_rev=4.0,
        m_train=10,
        m_test=30,
        train_offset="random",
        sigma_spike=0.01,
        encoding="invert",
        epochs=10,
        batch_size=32,
        learning_rate=None,
        tau_soft=0.07,
        gamma1=None,
        t_ref=None,
        gamma2=None,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.mode = mode
        self.e_rev = e_rev
        self.m_train = m_train
        self.m_test = m_test
        self.train_offset = train_offset
        self.sigma_spike = sigma_spike
        self.encoding = encoding
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.tau_soft = tau_soft
        self.gamma1 = gamma1
        self.t_ref = t_ref
        self.gamma2 = gamma2
        self.random_state = random_state

    def _cost_params(self) -> CostParams:
        base = CostParams.rc_default() if self.mode == "rc_spike" else CostParams.ttfs_default()
        return CostParams(
            tau_soft=self.tau_soft,
            gamma1=base.gamma1 if self.gamma1 is None else self.gamma1,
            t_ref=base.t_ref if self.t_ref is None else self.t_ref,
            gamma2=base.gamma2 if self.gamma2 is None else self.gamma2,
        )

    def _encode(self, X):
        scheme = "image" if self.encoding == "invert" else "iris"
        return encode(X, np.zeros(X.shape[0], dtype=int), scheme=scheme).times

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if X.min() < -1e-9 or X.max() > 1.0 + 1e-9:
            raise ValueError("features must be scaled to [0, 1] before fitting")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        times = self._encode(X)
        sizes = (times.shape[1],) + tuple(self.hidden_layer_sizes) + (len(self.classes_),)
        cfg = ModelConfig(
            layer_sizes=sizes,
            mode=self.mode,
            e_rev=self.e_rev,
            m_train=self.m_train,
            m_test=self.m_test,
            train_offset=self.train_offset,
            sigma_spike=self.sigma_spike,
            seed=self.random_state,
        )
        rng = np.random.default_rng(self.random_state)
        cp = self._cost_params()
        if self.mode == "rc_spike":
            weights = init_rc(sizes, rng)
            lr = 1e-4 if self.learning_rate is None else self.learning_rate
        else:
            weights = init_ttfs(sizes, self.e_rev, cp.t_ref, rng)
            lr = 2e-4 if self.learning_rate is None else self.learning_rate
        self.network_ = SpikingNetwork.build(cfg, weights)
        self.history_ = train_and_eval(
            self.network_, times, y_idx, None, None,
            epochs=self.epochs, cp=cp, lr=lr, batch_size=self.batch_size,
        )
        self.n_features_in_ = X.shape[1]
        return self

    def decision_times(self, X):
        """Output-layer spike times (earlier = stronger class evidence)."""
        check_is_fitted(self, "network_")
        X = check_array(X)
        times = self._encode(X)
        rng = np.random.default_rng(self.random_state + 1)
        return forward_pass(times, self.network_, phase="test", rng=rng)

    def predict(self, X):
        times = self.decision_times(X)
        return self.classes_[np.argmin(times, axis=1)]
