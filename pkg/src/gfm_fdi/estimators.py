"""scikit-learn style wrappers around the functional core.

Hyperparameters live in ``__init__`` and are only stored there, so
``get_params``/``set_params``/``clone`` behave as usual.  Fitted state ends
in an underscore.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .detection import DEFAULT_HOLD, DetectionReport, FaultWindow, ResidualTrace, compute_threshold, detect
from .faults import FaultKind
from .lmi import METHODS, OBJECTIVES, synthesize
from .model import GfmParameters, InverterModel, build_inverter_model
from .sector import (
    DEFAULT_SAFETY, OperatingRegion, SectorConstants, estimate_sector_constants,
    validate_constants,
)


def _as_model(model) -> InverterModel:
    if isinstance(model, GfmParameters):
        return build_inverter_model(model)
    if isinstance(model, InverterModel):
        return model
    raise TypeError("expected GfmParameters or InverterModel")


def _as_signal(J) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    if J.ndim != 1 or J.size == 0:
        raise ValueError("the residual norm must be a non-empty 1-D array")
    if not np.all(np.isfinite(J)) or np.any(J < 0):
        raise ValueError("the residual norm must be finite and non-negative")
    return J


class SectorConstantsEstimator(BaseEstimator):
    """Sampled Lipschitz, one-sided Lipschitz and quadratic-inner-bound constants."""

    def __init__(self, n_samples=100_000, seed=0, safety=DEFAULT_SAFETY, phi_grid=None):
        self.n_samples = n_samples
        self.seed = seed
        self.safety = safety
        self.phi_grid = phi_grid

    def fit(self, model, region: OperatingRegion):
        if int(self.n_samples) < 2:
            raise ValueError("n_samples must be at least 2")
        if self.safety < 1.0:
            raise ValueError("safety must be at least 1")
        nonlinearity = _as_model(model) if isinstance(model, GfmParameters) else model
        self.constants_ = estimate_sector_constants(
            nonlinearity, region, int(self.n_samples), self.seed, self.phi_grid, self.safety)
        self.region_ = region
        return self

    def transform(self, X=None):
        check_is_fitted(self, "constants_")
        c = self.constants_
        return np.array([c.gamma, c.rho, c.delta, c.phi])

    def score(self, model, region: OperatingRegion | None = None, n_samples=None, seed=12345):
        """Fraction of fresh pairs that respect all three bounds."""
        check_is_fitted(self, "constants_")
        nonlinearity = _as_model(model) if isinstance(model, GfmParameters) else model
        rep = validate_constants(self.constants_, nonlinearity, region or self.region_,
                                 n_samples or int(self.n_samples), seed)
        return 1.0 - rep.violations / max(3 * rep.n_pairs, 1)


class ObserverSynthesizer(BaseEstimator):
    """Observer gain from the matrix-inequality program for one fault kind."""

    def __init__(self, fault="busbar", method="olqb", constants=None, alpha=1e5, beta=1e5,
                 objective="feasibility", solver=None):
        self.fault = fault
        self.method = method
        self.constants = constants
        self.alpha = alpha
        self.beta = beta
        self.objective = objective
        self.solver = solver

    def _check(self):
        FaultKind(self.fault)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if self.constants is None:
            raise ValueError("constants are required (SectorConstants, dict or a scalar gamma)")

    def fit(self, model, y=None):
        self._check()
        self.model_ = _as_model(model)
        self.design_ = synthesize(self.model_, FaultKind(self.fault), self.method, self.constants,
                                  float(self.alpha), float(self.beta), self.solver, self.objective)
        self.gain_ = self.design_.L
        return self

    def transform(self, X):
        """Observer correction ``L (y - y_hat)`` for rows of output errors."""
        check_is_fitted(self, "gain_")
        X = np.atleast_2d(np.asarray(X, float))
        if X.shape[1] != self.gain_.shape[1]:
            raise ValueError(f"expected {self.gain_.shape[1]} output-error columns")
        return X @ self.gain_.T


class ResidualDetector(BaseEstimator, TransformerMixin):
    """Threshold from a fault-free residual norm, alarms on new data.

    Inputs are 1-D arrays of ``J`` sampled every ``dt`` seconds.
    """

    def __init__(self, dt=1e-5, margin=0.05, hold=DEFAULT_HOLD, lowpass_hz=None,
                 longest_fault=None):
        self.dt = dt
        self.margin = margin
        self.hold = hold
        self.lowpass_hz = lowpass_hz
        self.longest_fault = longest_fault

    def _trace(self, J) -> ResidualTrace:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        tr = ResidualTrace(float(self.dt), _as_signal(J))
        return tr.lowpass(self.lowpass_hz) if self.lowpass_hz else tr

    def fit(self, J, y=None):
        self.threshold_ = compute_threshold(self._trace(J), self.margin, self.longest_fault)
        return self

    def transform(self, J):
        """The signal the detector compares against the threshold."""
        return self._trace(J).signal

    def predict(self, J):
        check_is_fitted(self, "threshold_")
        return self.transform(J) > self.threshold_.J_th

    def report(self, J, windows) -> DetectionReport:
        """Per-window onset and clearance times for a faulted trace."""
        check_is_fitted(self, "threshold_")
        windows = [w if isinstance(w, FaultWindow) else FaultWindow(*w) for w in windows]
        return detect(self._trace(J), self.threshold_, windows, self.hold)


__all__ = ["ObserverSynthesizer", "ResidualDetector", "SectorConstantsEstimator", "SectorConstants"]
