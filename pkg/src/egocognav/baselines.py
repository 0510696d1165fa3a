"""Comparison methods: motion extrapolators and linear uncertainty regressors."""
import json
import math
from pathlib import Path

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, RegressorMixin

from .episodes.data import ENV_LABELS, T_FUTURE, mask_bits
from .errors import TooShort, UnfitModel
from .geometry import matrix_to_rot6d, rot6d_to_matrix
from .model import ForecastBundle
from .validation import check_targets, check_windows


def _past(X):
    batch = check_windows(X)
    if batch.motion.shape[1] < 2:
        raise TooShort("extrapolation needs at least two past steps")
    return batch


def const_vel(X, t_future=T_FUTURE):
    """Repeat the last body delta; keep turning the head by its last relative rotation."""
    batch = _past(X)
    traj = np.repeat(batch.motion[:, -1:, :], t_future, axis=1)
    prev = rot6d_to_matrix(batch.head[:, -2])
    last = rot6d_to_matrix(batch.head[:, -1])
    step = np.swapaxes(prev, -1, -2) @ last
    heads = []
    cur = last
    for _ in range(t_future):
        cur = cur @ step
        heads.append(cur)
    head = matrix_to_rot6d(np.stack(heads, axis=1), check=False)
    return traj, head


def linear_fit(series):
    """Least-squares ``a * t + b`` per column of ``(..., T, D)`` against t = 0..T-1.

    Returns (slope, intercept), each ``(..., D)``.
    """
    series = np.asarray(series, dtype=float)
    t = np.arange(series.shape[-2], dtype=float)
    tc = t - t.mean()
    denom = float((tc * tc).sum())
    mean = series.mean(axis=-2)
    slope = np.einsum("t,...td->...d", tc, series) / denom
    return slope, mean - slope * t.mean()


def lin_ext(X, t_future=T_FUTURE):
    """Per-axis linear extrapolation of deltas and raw 6D head vectors."""
    batch = _past(X)
    t1 = batch.motion.shape[1]
    future_t = np.arange(t1, t1 + t_future, dtype=float)[:, None]
    a, b = linear_fit(batch.motion)
    traj = a[:, None, :] * future_t + b[:, None, :]
    a, b = linear_fit(batch.head)
    raw = a[:, None, :] * future_t + b[:, None, :]
    head = matrix_to_rot6d(rot6d_to_matrix(raw), check=False)
    return traj, head


def m_transformer_forward(net, sample):
    """Forward pass of a trained early-fusion network (see ``model.MTransformer``)."""
    return net.forward(sample)


# ---------------------------------------------------------------- uncertainty features

def channel_ambiguity(features):
    """Normalized entropy of the softmax over per-channel energies of a ``(..., G, G, C)`` grid."""
    features = np.asarray(features, dtype=float)
    energy = (features ** 2).mean(axis=(-3, -2))
    p = softmax(energy, axis=-1)
    c = energy.shape[-1]
    if c < 2:
        return np.zeros(energy.shape[:-1])
    h = -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1)
    return h / math.log(c)


def heading_variability(motion):
    """Population std of dpsi over the past window."""
    return np.asarray(motion, dtype=float)[..., 2].std(axis=-1)


def path_features(X):
    """junction count, occlusion count, crowd flag, goal distance, heading variability."""
    batch = check_windows(X)
    bits = mask_bits(batch.env_masks, len(ENV_LABELS))
    jct = bits[..., ENV_LABELS.index("JCT")].sum(axis=-1)
    occ = bits[..., ENV_LABELS.index("OCC")].sum(axis=-1)
    crowd = bits[..., ENV_LABELS.index("CROWD")].any(axis=-1)
    return np.column_stack([jct, occ, crowd, batch.goal[:, -1, 0],
                            heading_variability(batch.motion)]).astype(float)


def emu_features(X):
    batch = check_windows(X)
    return np.column_stack([channel_ambiguity(batch.features[:, -1]),
                            heading_variability(batch.motion)])


class _LinearUncertainty(BaseEstimator, RegressorMixin):
    """Least-squares linear map from a feature vector to uncertainty, clamped to [0, 1]."""

    feature_names = ()

    def _features(self, X):
        raise NotImplementedError

    def fit(self, X, y=None):
        batch, target = check_targets(X, y)
        F = self._features(batch)
        A = np.column_stack([F, np.ones(len(F))])
        sol, *_ = np.linalg.lstsq(A, target, rcond=None)
        self.coef_ = sol[:-1]
        self.intercept_ = float(sol[-1])
        return self

    def _check_fitted(self):
        if not hasattr(self, "coef_"):
            raise UnfitModel(f"{type(self).__name__} must be fit before predict")

    def decision_function(self, X):
        self._check_fitted()
        return self._features(check_windows(X)) @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.clip(self.decision_function(X), 0.0, 1.0)

    def to_json(self):
        self._check_fitted()
        return json.dumps({"method": type(self).__name__, "features": list(self.feature_names),
                           "coef": [float(c) for c in self.coef_], "intercept": self.intercept_})

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        est = cls()
        est.coef_ = np.asarray(data["coef"], dtype=float)
        est.intercept_ = float(data["intercept"])
        return est

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


class EMUProxy(_LinearUncertainty):
    """Scene ambiguity (channel-energy entropy) and heading variability."""

    feature_names = ("ambiguity", "variability")

    def _features(self, X):
        return emu_features(X)


class PathU(_LinearUncertainty):
    """Route-complexity features of the past window."""

    feature_names = ("junction_count", "occlusion_count", "crowd_flag", "goal_distance",
                     "motion_variability")

    def _features(self, X):
        return path_features(X)


class _Extrapolator(BaseEstimator):
    """Stateless forecaster; ``fit`` only records that it was called."""

    def __init__(self, t_future=T_FUTURE):
        self.t_future = t_future

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, X):
        traj, head = self._extrapolate(X, self.t_future)
        return ForecastBundle(traj=traj, head=head)


class ConstantVelocity(_Extrapolator):
    _extrapolate = staticmethod(const_vel)


class LinearExtrapolation(_Extrapolator):
    _extrapolate = staticmethod(lin_ext)
