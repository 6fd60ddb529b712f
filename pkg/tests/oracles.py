"""Independent reference implementations used by the test suite.

Everything here is written the slow, obvious way on purpose: arbitrary
precision arithmetic for kernel values, dense matrix inversion for GP
posteriors, exhaustive path enumeration for HMM likelihoods and DTW.
None of it shares code with the package beyond reading plain parameter
values off the public dataclasses, so agreement is meaningful.
"""

from __future__ import annotations

import math

import mpmath as mp
import numpy as np
from scipy.stats import multivariate_normal

mp.mp.dps = 50

PARAM_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# Kernel closed forms (arbitrary precision).

def se_value(variance, lengthscale, t, t_prime) -> mp.mpf:
    d = mp.mpf(t) - mp.mpf(t_prime)
    ell = mp.mpf(lengthscale)
    return mp.mpf(variance) * mp.e ** (-d * d / (2 * ell * ell))


def matern32_value(variance, lengthscale, t, t_prime) -> mp.mpf:
    r = abs(mp.mpf(t) - mp.mpf(t_prime))
    a = mp.sqrt(3) * r / mp.mpf(lengthscale)
    return mp.mpf(variance) * (1 + a) * mp.e ** (-a)


def periodic_value(variance, lengthscale, period, t, t_prime) -> mp.mpf:
    r = abs(mp.mpf(t) - mp.mpf(t_prime))
    s = mp.sin(mp.pi * r / mp.mpf(period))
    ell = mp.mpf(lengthscale)
    return mp.mpf(variance) * mp.e ** (-2 * s * s / (ell * ell))


def composite_value(periodic, se, matern32, t, t_prime) -> mp.mpf:
    """Composite kernel from natural-space triples.

    ``periodic`` is (variance, lengthscale, period); ``se`` and
    ``matern32`` are (variance, lengthscale).
    """
    return (periodic_value(periodic[0], periodic[1], periodic[2], t, t_prime)
            + se_value(se[0], se[1], t, t_prime)
            + matern32_value(matern32[0], matern32[1], t, t_prime))


# ---------------------------------------------------------------------------
# Float covariance construction shared by the GP oracles.

def _natural_kernel(model):
    """Natural-space kernel constants of a MoGPModel, with the floor."""
    k = model.kernel

    def positive(log_value: float) -> float:
        return max(math.exp(log_value), PARAM_FLOOR)

    return {
        "per": (positive(k.periodic.log_variance),
                positive(k.periodic.log_lengthscale),
                positive(k.periodic.log_period)),
        "se": (positive(k.se.log_variance), positive(k.se.log_lengthscale)),
        "mat": (positive(k.matern32.log_variance),
                positive(k.matern32.log_lengthscale)),
        "b": model.coreg.w @ model.coreg.w.T
             + np.diag(np.maximum(np.exp(model.coreg.log_kappa), PARAM_FLOOR)),
        "noise": positive(model.log_noise_variance),
    }


def _temporal_value(constants, t: float, t_prime: float) -> float:
    pv, pl, pp = constants["per"]
    sv, sl = constants["se"]
    mv, ml = constants["mat"]
    r = abs(t - t_prime)
    sin_term = math.sin(math.pi * r / pp)
    per = pv * math.exp(-2.0 * sin_term * sin_term / (pl * pl))
    se = sv * math.exp(-r * r / (2.0 * sl * sl))
    a = math.sqrt(3.0) * r / ml
    mat = mv * (1.0 + a) * math.exp(-a)
    return per + se + mat


def dense_covariance(model, times, outputs) -> np.ndarray:
    """ICM covariance built entry by entry from the closed forms."""
    constants = _natural_kernel(model)
    times = np.asarray(times, dtype=float)
    outputs = np.asarray(outputs, dtype=int)
    n = times.shape[0]
    cov = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            cov[i, j] = constants["b"][outputs[i], outputs[j]] \
                * _temporal_value(constants, times[i], times[j])
    return cov


def dense_lml(model) -> float:
    """Log marginal likelihood via explicit inversion and slogdet."""
    constants = _natural_kernel(model)
    training = model.training
    cov = dense_covariance(model, training.times, training.outputs)
    cov = cov + constants["noise"] * np.eye(training.size)
    centered = training.values - model.means[training.outputs]
    inv = np.linalg.inv(cov)
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    n = training.size
    return float(-0.5 * centered @ inv @ centered - 0.5 * logdet
                 - 0.5 * n * math.log(2.0 * math.pi))


def dense_posterior(model, query_times, output: int):
    """Posterior mean and variance (noise included) for one output."""
    constants = _natural_kernel(model)
    training = model.training
    cov = dense_covariance(model, training.times, training.outputs)
    cov = cov + constants["noise"] * np.eye(training.size)
    inv = np.linalg.inv(cov)
    centered = training.values - model.means[training.outputs]

    b = constants["b"]
    query = np.asarray(query_times, dtype=float).ravel()
    mean = np.empty(query.shape[0])
    var = np.empty(query.shape[0])
    for qi, tq in enumerate(query):
        k_star = np.array([
            b[output, training.outputs[i]]
            * _temporal_value(constants, tq, training.times[i])
            for i in range(training.size)])
        prior = b[output, output] * _temporal_value(constants, tq, tq)
        mean[qi] = model.means[output] + k_star @ inv @ centered
        var[qi] = prior + constants["noise"] - k_star @ inv @ k_star
    return mean, var


def central_difference(func, theta: np.ndarray, step: float) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.shape[0]):
        high = theta.copy()
        low = theta.copy()
        high[i] += step
        low[i] -= step
        grad[i] = (func(high) - func(low)) / (2.0 * step)
    return grad


def sample_mogp(constants_model, times, outputs, rng: np.random.Generator):
    """Draw latent f and noisy y from the model's prior (mean included)."""
    cov = dense_covariance(constants_model, times, outputs)
    jitter = 1e-10 * float(np.mean(np.diag(cov)))
    chol = np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
    latent = chol @ rng.standard_normal(cov.shape[0])
    latent = latent + constants_model.means[np.asarray(outputs, dtype=int)]
    noise_std = math.sqrt(_natural_kernel(constants_model)["noise"])
    observed = latent + noise_std * rng.standard_normal(latent.shape[0])
    return latent, observed


# ---------------------------------------------------------------------------
# HMM references.

def hmm_log_emissions(means, covariance, steps) -> np.ndarray:
    """(T, S) log emission densities via scipy's multivariate normal."""
    steps = np.asarray(steps, dtype=float)
    return np.column_stack([
        multivariate_normal(mean=means[i], cov=covariance).logpdf(steps)
        for i in range(means.shape[0])])


def hmm_enumerate(initial, transitions, means, covariance, steps):
    """Exact log-likelihood and best path by summing over every path."""
    initial = np.asarray(initial, dtype=float)
    transitions = np.asarray(transitions, dtype=float)
    steps = np.atleast_2d(np.asarray(steps, dtype=float))
    t_len = steps.shape[0]
    num_states = initial.shape[0]

    log_b = hmm_log_emissions(np.asarray(means, dtype=float),
                              np.asarray(covariance, dtype=float), steps)
    if log_b.ndim == 1:
        log_b = log_b[None, :]
    with np.errstate(divide="ignore"):
        log_pi = np.log(initial)
        log_a = np.log(transitions)

    paths = np.indices((num_states,) * t_len).reshape(t_len, -1)
    scores = log_pi[paths[0]] + log_b[0, paths[0]]
    for t in range(1, t_len):
        scores = scores + log_a[paths[t - 1], paths[t]] + log_b[t, paths[t]]

    finite = scores[np.isfinite(scores)]
    if finite.size == 0:
        raise ValueError("every path has zero probability")
    peak = float(np.max(finite))
    log_likelihood = peak + math.log(float(np.sum(np.exp(scores - peak))))
    best = int(np.argmax(scores))
    return log_likelihood, paths[:, best] + 1


def sample_hmm(initial, transitions, means, covariance, length: int,
               rng: np.random.Generator):
    """Draw one (states, observations) pair from the generative model."""
    initial = np.asarray(initial, dtype=float)
    transitions = np.asarray(transitions, dtype=float)
    means = np.asarray(means, dtype=float)
    num_states = initial.shape[0]
    states = np.empty(length, dtype=int)
    states[0] = rng.choice(num_states, p=initial)
    for t in range(1, length):
        states[t] = rng.choice(num_states, p=transitions[states[t - 1]])
    observations = np.array([
        rng.multivariate_normal(means[s], covariance) for s in states])
    return states + 1, observations


# ---------------------------------------------------------------------------
# DTW by path enumeration.

def dtw_enumerate(a, b) -> float:
    """Minimum warping cost over every monotone alignment path."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    n, m = a.shape[0], b.shape[0]
    best = [math.inf]

    def walk(i: int, j: int, acc: float) -> None:
        acc = acc + abs(a[i] - b[j])
        if acc >= best[0]:
            return
        if i == n - 1 and j == m - 1:
            best[0] = acc
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best[0]
