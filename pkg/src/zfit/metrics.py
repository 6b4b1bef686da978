"""Fit-quality and parameter-recovery metrics."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .loss import LossKind, ResidualModel
from .spectrum import Spectrum

# Report column tokens.
CHI2 = "chi2"
R2_SCORE = "r2_score"
R2_MAG = "r2_mag"
R2_PHASE = "r2_phase"
TIME = "time_s"
METRIC_TOKENS = (CHI2, R2_SCORE, R2_MAG, R2_PHASE, TIME)


class MetricError(ValueError):
    pass


def _pair(observed: Spectrum, predicted: Spectrum):
    if not observed.same_grid(predicted):
        raise MetricError("observed and predicted spectra must share a frequency grid")
    return observed.z, predicted.z


def chi_squared_arrays(z_obs, z_pred) -> float:
    if np.any(np.abs(z_obs) == 0):
        raise MetricError("observed impedance has zero magnitude")
    r = ResidualModel(LossKind.X2, z_obs).residuals(z_pred)
    return float(np.sum(r * r))


def chi_squared(observed: Spectrum, predicted: Spectrum) -> float:
    """Modulus-weighted sum of squared rectangular residuals (raw sum, no 1/n)."""
    return chi_squared_arrays(*_pair(observed, predicted))


def _r2(true, pred) -> float:
    ss_tot = float(np.sum((true - true.mean()) ** 2))
    if ss_tot == 0:
        raise MetricError("zero total variance")
    return 1.0 - float(np.sum((true - pred) ** 2)) / ss_tot


def r2_triple_arrays(z_obs, z_pred):
    if z_obs.size < 2:
        raise MetricError("R^2 needs at least two points")
    re_t, im_t = z_obs.real, z_obs.imag
    ss_res = np.sum((re_t - z_pred.real) ** 2) + np.sum((im_t - z_pred.imag) ** 2)
    ss_tot = np.sum((re_t - re_t.mean()) ** 2) + np.sum((im_t - im_t.mean()) ** 2)
    if ss_tot == 0:
        raise MetricError("zero total variance")
    score = 1.0 - float(ss_res / ss_tot)
    r2_mag = _r2(np.abs(z_obs), np.abs(z_pred))
    r2_phase = _r2(np.angle(z_obs), np.angle(z_pred))
    return score, r2_mag, r2_phase


def r2_triple(observed: Spectrum, predicted: Spectrum):
    """``(r2_score, r2_magnitude, r2_phase)``.

    ``r2_score`` pools the real and imaginary channels: the residual sum of
    squares over both channels divided by the summed per-channel variance.
    """
    return r2_triple_arrays(*_pair(observed, predicted))


def ape(fitted: Sequence[float], truth: Sequence[float], schema) -> dict:
    """Absolute percentage error per component, keyed by parameter name."""
    if not len(fitted) == len(truth) == len(schema):
        raise ValueError("fitted, truth and schema must be aligned")
    out = {}
    for d, f, t in zip(schema, fitted, truth):
        if t == 0:
            raise MetricError(f"true value of {d.name} is zero")
        out[d.name] = 100.0 * abs(f - t) / abs(t)
    return out


def ape_up_to_symmetry(fitted: Sequence[float], truth: Sequence[float], model) -> dict:
    """APE after relabelling interchangeable circuit blocks to best match ``truth``.

    Swapping two same-shaped series blocks gives an identical spectrum, so
    labelled APE can be large for a perfect fit. The relabelling with the
    smallest worst-component error is used.
    """
    from .circuit import equivalent_permutations

    fitted = np.asarray(fitted, dtype=float)
    best = None
    for perm in equivalent_permutations(model):
        table = ape(fitted[perm], truth, model.schema)
        if best is None or max(table.values()) < max(best.values()):
            best = table
    return best


def mape(tables: Sequence[Mapping[str, float]]) -> dict:
    """Per-component mean of APE tables plus ``Average`` over components."""
    if not tables:
        raise MetricError("no APE tables")
    keys = list(tables[0])
    for t in tables[1:]:
        if set(t) != set(keys):
            raise MetricError("APE tables have inconsistent components")
    out = {k: float(np.mean([t[k] for t in tables])) for k in keys}
    out["Average"] = float(np.mean([out[k] for k in keys]))
    return out
