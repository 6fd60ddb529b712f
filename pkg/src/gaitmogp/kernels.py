"""Composite covariance functions for gait-cycle regression.

The temporal kernel is a sum of three stationary parts evaluated on
normalized cycle time: a periodic exponential-sine-squared term for the
repeating gait pattern, a squared-exponential term for smooth drift, and
a Matern-3/2 term for rougher local structure,

    k_t(t, t') = k_per(t, t') + k_se(t, t') + k_mat(t, t').

Cross-output structure follows the intrinsic coregionalization model:
for outputs m, m' the covariance is B[m, m'] * k_t(t, t') with
B = W W^T + diag(kappa) positive semi-definite by construction.

All positive hyperparameters (variances, length-scales, period, kappa)
are stored in log-space so optimization is unconstrained; values are
floored at PARAM_FLOOR after exponentiation to avoid degenerate kernels.
Functions here are pure and safe for concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# Floor applied to every positive hyperparameter after exponentiation.
PARAM_FLOOR = 1e-10

_SQRT3 = math.sqrt(3.0)


def _floored_exp(log_value):
    """exp(log_value) clipped below at PARAM_FLOOR (elementwise)."""
    return np.maximum(np.exp(log_value), PARAM_FLOOR)


def _floored_exp_with_grad(log_value):
    """Value and d(value)/d(log_value) of the floored exponential.

    The derivative is zero where the floor is active, matching what a
    finite-difference check sees.
    """
    raw = np.exp(log_value)
    value = np.maximum(raw, PARAM_FLOOR)
    grad = np.where(raw > PARAM_FLOOR, raw, 0.0)
    return value, grad


@dataclass
class SubKernelParams:
    """Log-space parameters of one kernel component.

    Parameters
    ----------
    log_variance : float
        Log of the signal variance sigma^2.
    log_lengthscale : float
        Log of the length-scale.
    log_period : float or None
        Log of the period; only the periodic component uses it.
    """

    log_variance: float
    log_lengthscale: float
    log_period: float | None = None

    @classmethod
    def from_values(cls, variance: float, lengthscale: float,
                    period: float | None = None) -> "SubKernelParams":
        """Build from natural-space values (must be positive)."""
        for name, value in (("variance", variance), ("lengthscale", lengthscale)):
            if not value > 0.0:
                raise ValidationError(f"{name} must be positive, got {value}")
        if period is not None and not period > 0.0:
            raise ValidationError(f"period must be positive, got {period}")
        return cls(
            log_variance=math.log(variance),
            log_lengthscale=math.log(lengthscale),
            log_period=None if period is None else math.log(period),
        )

    @property
    def variance(self) -> float:
        return float(_floored_exp(self.log_variance))

    @property
    def lengthscale(self) -> float:
        return float(_floored_exp(self.log_lengthscale))

    @property
    def period(self) -> float:
        if self.log_period is None:
            raise ValidationError("component has no period parameter")
        return float(_floored_exp(self.log_period))


@dataclass
class CompositeKernelSpec:
    """The three components of the temporal kernel."""

    periodic: SubKernelParams
    se: SubKernelParams
    matern32: SubKernelParams

    def __post_init__(self):
        if self.periodic.log_period is None:
            raise ValidationError("periodic component requires a period")

    @classmethod
    def default(cls) -> "CompositeKernelSpec":
        """Initialization used by the optimizer: unit variances and
        period, length-scales 0.2."""
        return cls(
            periodic=SubKernelParams.from_values(1.0, 0.2, period=1.0),
            se=SubKernelParams.from_values(1.0, 0.2),
            matern32=SubKernelParams.from_values(1.0, 0.2),
        )

    def prior_variance(self) -> float:
        """k_t(t, t): sum of the three signal variances."""
        return (self.periodic.variance + self.se.variance
                + self.matern32.variance)


@dataclass
class CoregionalizationFactor:
    """Low-rank-plus-diagonal cross-output factor B = W W^T + diag(kappa).

    W is (num_outputs, rank) and unconstrained; kappa is stored in
    log-space and floored like the other positive parameters, keeping B
    positive definite.
    """

    w: np.ndarray
    log_kappa: np.ndarray

    def __post_init__(self):
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        self.log_kappa = np.asarray(self.log_kappa, dtype=float).ravel()
        if self.w.ndim != 2:
            raise ValidationError("W must be a 2-d array")
        if self.w.shape[0] != self.log_kappa.shape[0]:
            raise ValidationError(
                f"W has {self.w.shape[0]} rows but kappa has "
                f"{self.log_kappa.shape[0]} entries")
        if not (np.all(np.isfinite(self.w))
                and np.all(np.isfinite(self.log_kappa))):
            raise ValidationError("coregionalization parameters must be finite")

    @classmethod
    def from_values(cls, w: np.ndarray, kappa: np.ndarray) -> "CoregionalizationFactor":
        kappa = np.asarray(kappa, dtype=float).ravel()
        if np.any(kappa < 0.0):
            raise ValidationError("kappa entries must be non-negative")
        return cls(w=np.asarray(w, dtype=float),
                   log_kappa=np.log(np.maximum(kappa, PARAM_FLOOR)))

    @property
    def num_outputs(self) -> int:
        return self.w.shape[0]

    @property
    def rank(self) -> int:
        return self.w.shape[1]

    @property
    def kappa(self) -> np.ndarray:
        return _floored_exp(self.log_kappa)

    def matrix(self) -> np.ndarray:
        """Dense B, symmetric PSD with strictly positive diagonal."""
        return self.w @ self.w.T + np.diag(self.kappa)


# ---------------------------------------------------------------------------
# Component evaluations.  Each takes scalar or array time arguments and
# broadcasts; lag-based helpers are shared with the gradient code.

def _se_from_sqlag(params: SubKernelParams, sq_lag):
    variance = _floored_exp(params.log_variance)
    lengthscale = _floored_exp(params.log_lengthscale)
    return variance * np.exp(-0.5 * sq_lag / (lengthscale * lengthscale))


def _matern32_from_lag(params: SubKernelParams, abs_lag):
    variance = _floored_exp(params.log_variance)
    lengthscale = _floored_exp(params.log_lengthscale)
    a = _SQRT3 * abs_lag / lengthscale
    return variance * (1.0 + a) * np.exp(-a)


def _periodic_from_lag(params: SubKernelParams, abs_lag):
    variance = _floored_exp(params.log_variance)
    lengthscale = _floored_exp(params.log_lengthscale)
    period = _floored_exp(params.log_period)
    s = np.sin(np.pi * abs_lag / period)
    return variance * np.exp(-2.0 * s * s / (lengthscale * lengthscale))


def eval_se(params: SubKernelParams, t, t_prime):
    """Squared-exponential kernel sigma^2 exp(-(t-t')^2 / (2 l^2))."""
    d = np.asarray(t, dtype=float) - np.asarray(t_prime, dtype=float)
    return _se_from_sqlag(params, d * d)


def eval_matern32(params: SubKernelParams, t, t_prime):
    """Matern-3/2 kernel sigma^2 (1 + sqrt(3) r / l) exp(-sqrt(3) r / l)."""
    r = np.abs(np.asarray(t, dtype=float) - np.asarray(t_prime, dtype=float))
    return _matern32_from_lag(params, r)


def eval_periodic(params: SubKernelParams, t, t_prime):
    """Periodic kernel sigma^2 exp(-2 sin^2(pi |t-t'| / p) / l^2)."""
    r = np.abs(np.asarray(t, dtype=float) - np.asarray(t_prime, dtype=float))
    return _periodic_from_lag(params, r)


def eval_composite(spec: CompositeKernelSpec, t, t_prime):
    """Sum of the periodic, SE and Matern-3/2 components."""
    d = np.asarray(t, dtype=float) - np.asarray(t_prime, dtype=float)
    r = np.abs(d)
    return (_periodic_from_lag(spec.periodic, r)
            + _se_from_sqlag(spec.se, d * d)
            + _matern32_from_lag(spec.matern32, r))


def icm_covariance(spec: CompositeKernelSpec, coreg: CoregionalizationFactor,
                   m: int, m_prime: int, t, t_prime):
    """Cross-covariance between output m at t and output m' at t'.

    Returns B[m, m'] * k_t(t, t').
    """
    num = coreg.num_outputs
    for label, idx in (("m", m), ("m_prime", m_prime)):
        if not 0 <= idx < num:
            raise ValidationError(
                f"output index {label}={idx} out of range [0, {num})")
    b = coreg.matrix()[m, m_prime]
    return b * eval_composite(spec, t, t_prime)


def _validate_points(coreg: CoregionalizationFactor, times, outputs):
    times = np.asarray(times, dtype=float).ravel()
    outputs = np.asarray(outputs).ravel()
    if times.shape[0] != outputs.shape[0]:
        raise ValidationError(
            f"times ({times.shape[0]}) and outputs ({outputs.shape[0]}) "
            "must have equal length")
    if times.shape[0] == 0:
        raise ValidationError("at least one (time, output) point is required")
    if not np.all(np.isfinite(times)):
        raise ValidationError("times must be finite")
    if not np.issubdtype(outputs.dtype, np.integer):
        as_int = outputs.astype(int)
        if not np.array_equal(as_int, outputs):
            raise ValidationError("output indices must be integers")
        outputs = as_int
    if np.any(outputs < 0) or np.any(outputs >= coreg.num_outputs):
        raise ValidationError(
            f"output indices must lie in [0, {coreg.num_outputs})")
    return times, outputs.astype(int)


def gram_matrix(spec: CompositeKernelSpec, coreg: CoregionalizationFactor,
                times, outputs) -> np.ndarray:
    """Dense Gram matrix of the ICM kernel at stacked (time, output) points.

    Parameters
    ----------
    times : array of shape (n,)
        Normalized cycle times.
    outputs : int array of shape (n,)
        Output index of each point, in [0, num_outputs).

    Returns
    -------
    (n, n) symmetric PSD matrix.
    """
    times, outputs = _validate_points(coreg, times, outputs)
    d = times[:, None] - times[None, :]
    r = np.abs(d)
    temporal = (_periodic_from_lag(spec.periodic, r)
                + _se_from_sqlag(spec.se, d * d)
                + _matern32_from_lag(spec.matern32, r))
    b_oo = coreg.matrix()[np.ix_(outputs, outputs)]
    return b_oo * temporal


def kernel_parameter_names(num_outputs: int, rank: int) -> list[str]:
    """Canonical ordering of the unconstrained kernel + coreg parameters.

    kernel_gradients returns its matrices keyed and ordered by these names.
    """
    names = [
        "periodic.log_variance",
        "periodic.log_lengthscale",
        "periodic.log_period",
        "se.log_variance",
        "se.log_lengthscale",
        "matern32.log_variance",
        "matern32.log_lengthscale",
    ]
    names += [f"coreg.w[{i},{j}]" for i in range(num_outputs) for j in range(rank)]
    names += [f"coreg.log_kappa[{i}]" for i in range(num_outputs)]
    return names


def kernel_gradients(spec: CompositeKernelSpec, coreg: CoregionalizationFactor,
                     times, outputs) -> dict[str, np.ndarray]:
    """Gradient of the Gram matrix w.r.t. every unconstrained parameter.

    Returns a dict mapping parameter name (see kernel_parameter_names) to
    the (n, n) matrix dK/dtheta.  Gradients are taken in log-space for
    the positive parameters and natural space for W.
    """
    times, outputs = _validate_points(coreg, times, outputs)
    d = times[:, None] - times[None, :]
    r = np.abs(d)
    n = times.shape[0]

    per_var, dper_var = _floored_exp_with_grad(spec.periodic.log_variance)
    per_len, dper_len = _floored_exp_with_grad(spec.periodic.log_lengthscale)
    per_p, dper_p = _floored_exp_with_grad(spec.periodic.log_period)
    se_var, dse_var = _floored_exp_with_grad(spec.se.log_variance)
    se_len, dse_len = _floored_exp_with_grad(spec.se.log_lengthscale)
    mat_var, dmat_var = _floored_exp_with_grad(spec.matern32.log_variance)
    mat_len, dmat_len = _floored_exp_with_grad(spec.matern32.log_lengthscale)

    # Periodic component and its partials.
    u = np.pi * r / per_p
    sin_u = np.sin(u)
    k_per = per_var * np.exp(-2.0 * sin_u * sin_u / (per_len * per_len))
    # d/d log l = k * 4 sin^2(u) / l^2 (chain through l, times l).
    g_per_len = k_per * (4.0 * sin_u * sin_u / (per_len * per_len))
    g_per_len *= dper_len / per_len
    # d/d log p = k * 2 u sin(2u) / l^2.
    g_per_p = k_per * (2.0 * u * np.sin(2.0 * u) / (per_len * per_len))
    g_per_p *= dper_p / per_p

    # Squared exponential.
    sq = d * d
    k_se = se_var * np.exp(-0.5 * sq / (se_len * se_len))
    g_se_len = k_se * (sq / (se_len * se_len))
    g_se_len *= dse_len / se_len

    # Matern 3/2: d/da [(1+a) e^-a] = -a e^-a and da/d log l = -a.
    a = _SQRT3 * r / mat_len
    exp_a = np.exp(-a)
    k_mat = mat_var * (1.0 + a) * exp_a
    g_mat_len = mat_var * a * a * exp_a
    g_mat_len *= dmat_len / mat_len

    temporal = k_per + k_se + k_mat
    b = coreg.matrix()
    b_oo = b[np.ix_(outputs, outputs)]

    grads: dict[str, np.ndarray] = {
        "periodic.log_variance": b_oo * k_per * (dper_var / per_var),
        "periodic.log_lengthscale": b_oo * g_per_len,
        "periodic.log_period": b_oo * g_per_p,
        "se.log_variance": b_oo * k_se * (dse_var / se_var),
        "se.log_lengthscale": b_oo * g_se_len,
        "matern32.log_variance": b_oo * k_mat * (dmat_var / mat_var),
        "matern32.log_lengthscale": b_oo * g_mat_len,
    }

    # dB[a,b]/dW[m,r] = 1[a=m] W[b,r] + 1[b=m] W[a,r].
    w_at_points = coreg.w[outputs, :]          # (n, rank)
    kappa, dkappa = _floored_exp_with_grad(coreg.log_kappa)
    for m in range(coreg.num_outputs):
        sel = (outputs == m).astype(float)     # (n,)
        for j in range(coreg.rank):
            v = w_at_points[:, j]
            db = np.outer(sel, v) + np.outer(v, sel)
            grads[f"coreg.w[{m},{j}]"] = db * temporal
    for m in range(coreg.num_outputs):
        sel = (outputs == m).astype(float)
        grads[f"coreg.log_kappa[{m}]"] = np.outer(sel, sel) * temporal * dkappa[m]

    assert list(grads) == kernel_parameter_names(coreg.num_outputs, coreg.rank)
    assert all(g.shape == (n, n) for g in grads.values())
    return grads
