"""Weighted residuals for the six impedance loss functions.

Every loss has the form ``S = sum_i w_a (a_t - a_m)^2 + w_b (b_t - b_m)^2``
where ``(a, b)`` is either (real, imag) or a polar pair built from the
magnitude and the phase. Residual vectors use block layout:
``[a residuals for all points, b residuals for all points]``.

Logarithms are natural and phases are in radians.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .spectrum import Spectrum

LOG_BASE = "e"
PHASE_UNIT = "rad"


class LossEvaluationError(ArithmeticError):
    """A residual is non-finite. ``index`` is the offending frequency point."""

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        if index is not None:
            message = f"{message} (point {index})"
        super().__init__(message)


class LossKind(enum.Enum):
    UW = "uw"
    X2 = "x2"
    PW = "pw"
    B = "b"
    LOG_B = "log-b"
    LOG_BW = "log-bw"

    @property
    def token(self) -> str:
        return self.value

    @property
    def polar(self) -> bool:
        return self in (LossKind.B, LossKind.LOG_B, LossKind.LOG_BW)

    @classmethod
    def from_token(cls, token) -> "LossKind":
        if isinstance(token, cls):
            return token
        for kind in cls:
            if kind.value == token:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown loss {token!r}; valid tokens: {valid}")


WEIGHTED_LOSSES = (LossKind.X2, LossKind.PW, LossKind.LOG_B, LossKind.LOG_BW)


@dataclass(frozen=True)
class GuardConfig:
    """Floors for the PW and log-BW denominators.

    A denominator ``d`` with ``|d| < eps`` is replaced by ``sign(d) * eps``
    (``+eps`` when ``d == 0``).
    """

    eps_z: float = 1e-12
    eps_theta: float = 1e-6
    eps_lnz: float = 1e-6


def _guard(d: np.ndarray, eps: float) -> np.ndarray:
    small = np.abs(d) < eps
    if not small.any():
        return d
    d = d.copy()
    d[small] = np.where(d[small] < 0, -eps, eps)
    return d


class ResidualModel:
    """Residuals and their Jacobian against one fixed observed spectrum."""

    def __init__(self, kind: LossKind, z_obs, guards: GuardConfig | None = None):
        self.kind = kind = LossKind.from_token(kind)
        guards = guards or GuardConfig()
        z_obs = np.asarray(z_obs, dtype=complex)
        mag = np.abs(z_obs)
        if np.any(mag <= 0) or not np.all(np.isfinite(mag)):
            bad = int(np.flatnonzero(~(mag > 0) | ~np.isfinite(mag))[0])
            raise LossEvaluationError("observed magnitude must be positive and finite", bad)
        self.n = z_obs.size
        self.a_obs, self.b_obs = self._channels(z_obs)

        ones = np.ones(self.n)
        if kind is LossKind.UW or kind is LossKind.B or kind is LossKind.LOG_B:
            wa, wb = ones, ones
        elif kind is LossKind.X2:
            wa = wb = 1.0 / mag
        elif kind is LossKind.PW:
            wa = 1.0 / _guard(z_obs.real, guards.eps_z)
            wb = 1.0 / _guard(z_obs.imag, guards.eps_z)
        else:
            wa = 1.0 / _guard(np.log(mag), guards.eps_lnz)
            wb = 1.0 / _guard(np.angle(z_obs), guards.eps_theta)
        self.weights = np.concatenate([wa, wb])

    def _channels(self, z):
        kind = self.kind
        if not kind.polar:
            return z.real, z.imag
        theta = np.arctan2(z.imag, z.real)
        mag = np.abs(z)
        if kind is LossKind.B:
            return mag, theta
        with np.errstate(divide="ignore"):
            return np.log(mag), theta

    def residuals(self, z_pred) -> np.ndarray:
        z_pred = np.asarray(z_pred, dtype=complex)
        if z_pred.shape != (self.n,):
            raise ValueError("observed and predicted spectra differ in length")
        a, b = self._channels(z_pred)
        r = np.concatenate([self.a_obs - a, self.b_obs - b]) * self.weights
        if not np.all(np.isfinite(r)):
            bad = int(np.flatnonzero(~np.isfinite(r))[0]) % self.n
            raise LossEvaluationError("non-finite residual", bad)
        return r

    def jacobian(self, z_pred, dz_pred) -> np.ndarray:
        """d(residuals)/d(params), shape ``(2n, n_params)``.

        ``dz_pred`` is ``dZ/dparams`` with shape ``(n_params, n)``.
        """
        z_pred = np.asarray(z_pred, dtype=complex)
        kind = self.kind
        if not kind.polar:
            da, db = dz_pred.real, dz_pred.imag
        else:
            # d ln Z = dZ / Z gives d ln|Z| (real part) and d theta (imag part)
            dlog = dz_pred / z_pred
            da, db = dlog.real, dlog.imag
            if kind is LossKind.B:
                da = da * np.abs(z_pred)
        jac = -np.concatenate([da, db], axis=1).T
        return jac * self.weights[:, None]


def _check_pair(observed: Spectrum, predicted: Spectrum):
    if not observed.same_grid(predicted):
        raise ValueError("observed and predicted spectra must share a frequency grid")


def residuals(kind, observed: Spectrum, predicted: Spectrum, guards: GuardConfig | None = None) -> np.ndarray:
    _check_pair(observed, predicted)
    return ResidualModel(kind, observed.z, guards).residuals(predicted.z)


def loss_value(kind, observed: Spectrum, predicted: Spectrum, guards: GuardConfig | None = None) -> float:
    r = residuals(kind, observed, predicted, guards)
    return float(np.sum(r * r))
