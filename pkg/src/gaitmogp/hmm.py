"""Four-state Gaussian-emission HMM over bilateral ankle signals.

States 1 and 2 model normal stance/swing, states 3 and 4 their abnormal
counterparts. Emissions are bivariate Gaussians N(mu_i, Sigma) with one
covariance shared across states. Initial and transition probabilities
default to expert values favoring the normal states; whether EM
re-estimates them is a config switch (frozen by default).

All recursions run in log-space (no scaling-coefficient variant), which
is underflow-safe for the T = 400 sequences the pipeline produces.
Models are immutable after fitting; decoding is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from . import serialize
from .errors import NumericError, ValidationError

NUM_STATES = 4
OBS_DIM = 2
# 1-based indices of the abnormal stance/swing states.
ABNORMAL_STATES = (3, 4)

LOG_2PI = math.log(2.0 * math.pi)

# Expert initial distribution and transition matrix. Transitions out of
# normal states into the "wrong" abnormal phase are structurally zero.
DEFAULT_INITIAL_PROBS = (0.6, 0.3, 0.05, 0.05)
DEFAULT_TRANSITIONS = (
    (0.70, 0.25, 0.05, 0.00),
    (0.30, 0.60, 0.00, 0.10),
    (0.25, 0.20, 0.50, 0.05),
    (0.25, 0.20, 0.05, 0.50),
)

MODEL_SCHEMA = "hmm-v1"

# EM constants: a state below this total posterior mass keeps its mean,
# and the shared covariance gets a relative trace jitter every M-step.
EMPTY_STATE_MASS = 1e-12
COVARIANCE_JITTER = 1e-6
MIN_COVARIANCE_EIGENVALUE = 1e-8


@dataclass
class HmmModel:
    """Parameters theta = (pi, A, mu_1..mu_4, Sigma)."""

    initial_probs: np.ndarray
    transitions: np.ndarray
    state_means: np.ndarray
    shared_covariance: np.ndarray

    def __post_init__(self):
        self.initial_probs = np.asarray(self.initial_probs, dtype=float).ravel()
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.state_means = np.asarray(self.state_means, dtype=float)
        self.shared_covariance = np.asarray(self.shared_covariance, dtype=float)

    def validate(self) -> None:
        if self.initial_probs.shape != (NUM_STATES,):
            raise ValidationError("initial_probs must have length 4")
        if self.transitions.shape != (NUM_STATES, NUM_STATES):
            raise ValidationError("transitions must be 4x4")
        if self.state_means.shape != (NUM_STATES, OBS_DIM):
            raise ValidationError("state_means must be 4x2")
        if self.shared_covariance.shape != (OBS_DIM, OBS_DIM):
            raise ValidationError("shared_covariance must be 2x2")
        for name, arr in (("initial_probs", self.initial_probs),
                          ("transitions", self.transitions),
                          ("state_means", self.state_means),
                          ("shared_covariance", self.shared_covariance)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} must be finite")
        if np.any(self.initial_probs < 0.0) or np.any(self.transitions < 0.0):
            raise ValidationError("probabilities must be non-negative")
        if abs(float(np.sum(self.initial_probs)) - 1.0) > 1e-9:
            raise ValidationError("initial_probs must sum to 1 within 1e-9")
        row_sums = np.sum(self.transitions, axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-9):
            raise ValidationError("every transition row must sum to 1 within 1e-9")
        if np.max(np.abs(self.shared_covariance - self.shared_covariance.T)) > 1e-12:
            raise ValidationError("shared_covariance must be symmetric")
        min_eig = float(np.min(np.linalg.eigvalsh(self.shared_covariance)))
        if min_eig < MIN_COVARIANCE_EIGENVALUE:
            raise ValidationError(
                f"shared_covariance minimum eigenvalue {min_eig:.3e} < "
                f"{MIN_COVARIANCE_EIGENVALUE}")

    def copy(self) -> "HmmModel":
        return HmmModel(self.initial_probs.copy(), self.transitions.copy(),
                        self.state_means.copy(), self.shared_covariance.copy())


@dataclass
class ObservationSequence:
    """Bilateral ankle observations o(t) = [right y, left y] on a uniform grid."""

    steps: np.ndarray
    source: str = "raw"

    def __post_init__(self):
        self.steps = np.atleast_2d(np.asarray(self.steps, dtype=float))
        if self.steps.ndim != 2 or self.steps.shape[1] != OBS_DIM:
            raise ValidationError("steps must have shape (T, 2)")
        if self.steps.shape[0] < 1:
            raise ValidationError("observation sequence must have length >= 1")
        if not np.all(np.isfinite(self.steps)):
            raise ValidationError("observations must be finite")
        if self.source not in ("raw", "mogp-predicted"):
            raise ValidationError(
                f"source must be 'raw' or 'mogp-predicted', got {self.source!r}")

    def __len__(self) -> int:
        return self.steps.shape[0]


@dataclass
class DecodedStates:
    """Most probable state path (1-based indices) and its joint log score."""

    states: np.ndarray
    log_joint: float

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=int).ravel()
        if np.any(self.states < 1) or np.any(self.states > NUM_STATES):
            raise ValidationError("state indices must lie in {1, 2, 3, 4}")
        if not math.isfinite(self.log_joint):
            raise ValidationError("log_joint must be finite")


@dataclass
class BaumWelchConfig:
    max_iterations: int = 100
    tol: float = 1e-6          # relative change of total log-likelihood
    update_initial_probs: bool = False
    update_transitions: bool = False

    def validate(self) -> None:
        if self.max_iterations < 0:
            raise ValidationError("max_iterations must be >= 0")
        if not self.tol > 0.0:
            raise ValidationError("tol must be positive")


class AnomalousSegment(NamedTuple):
    start_time: float
    end_time: float
    state_label: str


def default_model() -> HmmModel:
    """Expert pi and A; placeholder emissions (zero means, identity Sigma).

    State means are meant to be initialized from data quantiles at fit
    time, see init_emissions_from_data.
    """
    return HmmModel(
        initial_probs=np.array(DEFAULT_INITIAL_PROBS),
        transitions=np.array(DEFAULT_TRANSITIONS),
        state_means=np.zeros((NUM_STATES, OBS_DIM)),
        shared_covariance=np.eye(OBS_DIM),
    )


def init_emissions_from_data(model: HmmModel, sequences) -> HmmModel:
    """Quantile-based emission initialization for Baum-Welch.

    mu_1/mu_2 are the per-channel 25th/75th percentile pairs of the
    pooled observations (stance low, swing high); mu_3/mu_4 sit one
    pooled standard deviation above them. Sigma starts as the diagonal
    of the pooled per-channel variances.
    """
    sequences = _validated_sequences(sequences)
    pooled = np.concatenate([seq.steps for seq in sequences], axis=0)
    q25 = np.percentile(pooled, 25.0, axis=0)
    q75 = np.percentile(pooled, 75.0, axis=0)
    std = np.std(pooled, axis=0)
    means = np.stack([q25, q75, q25 + std, q75 + std])
    var = np.maximum(np.var(pooled, axis=0), 1e-6)
    out = model.copy()
    out.state_means = means
    out.shared_covariance = np.diag(var)
    out.validate()
    return out


def _emission_log_matrix(model: HmmModel, steps: np.ndarray) -> np.ndarray:
    """(T, 4) matrix of log N(o_t; mu_i, Sigma)."""
    cov = model.shared_covariance
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValidationError("shared covariance is not positive definite")
    log_det_half = float(np.sum(np.log(np.diag(chol))))
    out = np.empty((steps.shape[0], NUM_STATES))
    for i in range(NUM_STATES):
        diff = steps - model.state_means[i]
        solved = np.linalg.solve(chol, diff.T)
        # Overflow to inf is fine: it surfaces as -inf log-density, which
        # the decoders detect and report.
        with np.errstate(over="ignore"):
            maha = np.sum(solved * solved, axis=0)
        out[:, i] = -0.5 * maha - log_det_half - 0.5 * OBS_DIM * LOG_2PI
    return out


def emission_logpdf(model: HmmModel, obs, state: int) -> float:
    """Log-density of a single observation under state's Gaussian (1-based)."""
    if not 1 <= int(state) <= NUM_STATES:
        raise ValidationError(f"state index must be in 1..4, got {state}")
    obs = np.asarray(obs, dtype=float).ravel()
    if obs.shape != (OBS_DIM,):
        raise ValidationError("observation must be a 2-vector")
    if not np.all(np.isfinite(obs)):
        raise ValidationError("observation must be finite")
    return float(_emission_log_matrix(model, obs[None, :])[0, int(state) - 1])


def _log_probs(model: HmmModel):
    with np.errstate(divide="ignore"):
        return np.log(model.initial_probs), np.log(model.transitions)


def forward_log_likelihood(model: HmmModel, seq: ObservationSequence) -> float:
    """log p(O | theta) via the log-space forward recursion."""
    model.validate()
    emissions = _emission_log_matrix(model, seq.steps)
    log_pi, log_a = _log_probs(model)
    log_alpha = log_pi + emissions[0]
    for t in range(1, len(seq)):
        log_alpha = logsumexp(log_alpha[:, None] + log_a, axis=0) + emissions[t]
    return float(logsumexp(log_alpha))


def viterbi_decode(model: HmmModel, seq: ObservationSequence) -> DecodedStates:
    """Most probable state path, log-space DP, ties to the lowest index."""
    model.validate()
    emissions = _emission_log_matrix(model, seq.steps)
    if np.any(np.all(np.isinf(emissions) & (emissions < 0), axis=1)):
        raise NumericError(
            "emission underflow: an observation is impossible under every state")
    log_pi, log_a = _log_probs(model)
    t_len = len(seq)

    delta = log_pi + emissions[0]
    backptr = np.zeros((t_len, NUM_STATES), dtype=int)
    for t in range(1, t_len):
        scores = delta[:, None] + log_a          # predecessor i -> state j
        # argmax returns the first maximal index, i.e. the lowest state.
        backptr[t] = np.argmax(scores, axis=0)
        delta = scores[backptr[t], np.arange(NUM_STATES)] + emissions[t]

    last = int(np.argmax(delta))
    log_joint = float(delta[last])
    path = np.empty(t_len, dtype=int)
    path[-1] = last
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = backptr[t, path[t]]
    return DecodedStates(states=path + 1, log_joint=log_joint)


def _validated_sequences(sequences) -> list[ObservationSequence]:
    sequences = list(sequences)
    if not sequences:
        raise ValidationError("at least one observation sequence is required")
    for seq in sequences:
        if not isinstance(seq, ObservationSequence):
            raise ValidationError("sequences must be ObservationSequence instances")
    return sequences


def _e_step(model: HmmModel, sequences):
    """Accumulated posterior statistics and the total log-likelihood."""
    log_pi, log_a = _log_probs(model)
    gamma_sum = np.zeros(NUM_STATES)
    gamma_obs = np.zeros((NUM_STATES, OBS_DIM))
    gamma_sq = np.zeros((NUM_STATES, OBS_DIM, OBS_DIM))
    gamma_first = np.zeros(NUM_STATES)
    xi_sum = np.zeros((NUM_STATES, NUM_STATES))
    total_points = 0
    total_ll = 0.0

    for seq in sequences:
        steps = seq.steps
        t_len = steps.shape[0]
        emissions = _emission_log_matrix(model, steps)

        log_alpha = np.empty((t_len, NUM_STATES))
        log_alpha[0] = log_pi + emissions[0]
        for t in range(1, t_len):
            log_alpha[t] = logsumexp(log_alpha[t - 1][:, None] + log_a, axis=0) \
                + emissions[t]
        seq_ll = float(logsumexp(log_alpha[-1]))

        log_beta = np.zeros((t_len, NUM_STATES))
        for t in range(t_len - 2, -1, -1):
            log_beta[t] = logsumexp(
                log_a + (emissions[t + 1] + log_beta[t + 1])[None, :], axis=1)

        gamma = np.exp(log_alpha + log_beta - seq_ll)
        gamma_sum += gamma.sum(axis=0)
        gamma_obs += gamma.T @ steps
        for i in range(NUM_STATES):
            weighted = steps * gamma[:, i][:, None]
            gamma_sq[i] += weighted.T @ steps
        gamma_first += gamma[0]

        if t_len > 1:
            for t in range(t_len - 1):
                log_xi = (log_alpha[t][:, None] + log_a
                          + (emissions[t + 1] + log_beta[t + 1])[None, :] - seq_ll)
                xi_sum += np.exp(log_xi)

        total_points += t_len
        total_ll += seq_ll

    stats = {
        "gamma_sum": gamma_sum,
        "gamma_obs": gamma_obs,
        "gamma_sq": gamma_sq,
        "gamma_first": gamma_first,
        "xi_sum": xi_sum,
        "total_points": total_points,
        "num_sequences": len(sequences),
    }
    return stats, total_ll


def _m_step(model: HmmModel, stats, config: BaumWelchConfig) -> HmmModel:
    gamma_sum = stats["gamma_sum"]
    new_means = model.state_means.copy()
    for i in range(NUM_STATES):
        # Empty-state rule: keep the previous mean below the mass floor.
        if gamma_sum[i] >= EMPTY_STATE_MASS:
            new_means[i] = stats["gamma_obs"][i] / gamma_sum[i]

    # Shared covariance pooled over all states around the new means.
    cov = np.zeros((OBS_DIM, OBS_DIM))
    for i in range(NUM_STATES):
        mu = new_means[i]
        s1 = stats["gamma_obs"][i]
        cov += (stats["gamma_sq"][i] - np.outer(mu, s1) - np.outer(s1, mu)
                + gamma_sum[i] * np.outer(mu, mu))
    cov /= float(stats["total_points"])
    cov = 0.5 * (cov + cov.T)
    cov += COVARIANCE_JITTER * (np.trace(cov) / 2.0) * np.eye(OBS_DIM)
    min_eig = float(np.min(np.linalg.eigvalsh(cov)))
    if min_eig < MIN_COVARIANCE_EIGENVALUE:
        cov += (MIN_COVARIANCE_EIGENVALUE - min_eig) * np.eye(OBS_DIM)

    new_pi = model.initial_probs.copy()
    if config.update_initial_probs:
        total = float(np.sum(stats["gamma_first"]))
        if total > 0.0:
            new_pi = stats["gamma_first"] / total

    new_a = model.transitions.copy()
    if config.update_transitions:
        xi = stats["xi_sum"]
        row_mass = xi.sum(axis=1)
        for i in range(NUM_STATES):
            # Zero rows keep their previous distribution; structural zeros
            # of A stay zero because xi vanishes wherever A[i, j] = 0.
            if row_mass[i] > 0.0:
                new_a[i] = xi[i] / row_mass[i]

    return HmmModel(initial_probs=new_pi, transitions=new_a,
                    state_means=new_means, shared_covariance=cov)


def baum_welch_fit(init: HmmModel, sequences,
                   config: BaumWelchConfig | None = None) -> HmmModel:
    """EM for the emission parameters (and optionally pi/A).

    Returns the refined model with the per-iteration total
    log-likelihood trace attached as ``log_likelihood_trace``; the trace
    is non-decreasing up to 1e-9 slack.
    """
    config = config or BaumWelchConfig()
    config.validate()
    init.validate()
    sequences = _validated_sequences(sequences)

    model = init.copy()
    trace: list[float] = []
    for iteration in range(config.max_iterations):
        stats, ll = _e_step(model, sequences)
        if not math.isfinite(ll):
            raise NumericError(
                f"non-finite log-likelihood in EM iteration {iteration}")
        trace.append(ll)
        if iteration > 0 and abs(trace[-1] - trace[-2]) <= \
                config.tol * max(1.0, abs(trace[-2])):
            break
        model = _m_step(model, stats, config)
        model.validate()
    else:
        if config.max_iterations > 0:
            _, final_ll = _e_step(model, sequences)
            trace.append(final_ll)

    if not trace:
        _, initial_ll = _e_step(model, sequences)
        trace.append(initial_ll)
    model.log_likelihood_trace = trace
    return model


def anomalous_segments(decoded: DecodedStates, time_grid) -> list[AnomalousSegment]:
    """Maximal runs of abnormal states as (start, end, dominant label).

    Contiguous steps decoded to state 3 or 4 merge into one segment;
    start/end are the grid times of the first and last step of the run
    and the label is the majority state within it ("s3" on ties).
    """
    grid = np.asarray(time_grid, dtype=float).ravel()
    states = decoded.states
    if grid.shape[0] != states.shape[0]:
        raise ValidationError(
            f"time grid length {grid.shape[0]} does not match decoded "
            f"length {states.shape[0]}")

    segments: list[AnomalousSegment] = []
    run_start = None
    for idx in range(states.shape[0] + 1):
        abnormal = idx < states.shape[0] and states[idx] in ABNORMAL_STATES
        if abnormal and run_start is None:
            run_start = idx
        elif not abnormal and run_start is not None:
            run = states[run_start:idx]
            count3 = int(np.sum(run == 3))
            count4 = int(np.sum(run == 4))
            label = "s3" if count3 >= count4 else "s4"
            segments.append(AnomalousSegment(
                start_time=float(grid[run_start]),
                end_time=float(grid[idx - 1]),
                state_label=label))
            run_start = None
    return segments


# ---------------------------------------------------------------------------
# Serialization (schema hmm-v1).

def save_model(model: HmmModel, path) -> None:
    model.validate()
    items = [
        ("schema", MODEL_SCHEMA),
        ("initial_probs", serialize.format_float_list(model.initial_probs)),
        ("transitions", serialize.format_float_list(model.transitions.ravel())),
        ("state_means", serialize.format_float_list(model.state_means.ravel())),
        ("shared_covariance",
         serialize.format_float_list(model.shared_covariance.ravel())),
    ]
    serialize.write_document(path, items)


def load_model(path) -> HmmModel:
    doc = serialize.read_document(path)
    schema = serialize.require_key(doc, "schema", str(path))
    if schema != MODEL_SCHEMA:
        raise ValidationError(f"{path}: schema {schema!r} is not {MODEL_SCHEMA!r}")
    def grab(key: str, count: int) -> np.ndarray:
        values = serialize.parse_float_list(
            serialize.require_key(doc, key, str(path)))
        if len(values) != count:
            raise ValidationError(
                f"{path}: {key} must have {count} entries, got {len(values)}")
        return np.array(values)
    model = HmmModel(
        initial_probs=grab("initial_probs", NUM_STATES),
        transitions=grab("transitions", NUM_STATES * NUM_STATES).reshape(
            NUM_STATES, NUM_STATES),
        state_means=grab("state_means", NUM_STATES * OBS_DIM).reshape(
            NUM_STATES, OBS_DIM),
        shared_covariance=grab("shared_covariance", OBS_DIM * OBS_DIM).reshape(
            OBS_DIM, OBS_DIM),
    )
    model.validate()
    return model
