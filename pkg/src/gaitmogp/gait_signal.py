"""Gait signal preprocessing and biomechanical feature extraction.

Covers the preprocessing chain (zero-phase Butterworth smoothing, linear
gap imputation, per-subject normalization with temporal alignment onto a
T-point cycle grid) and the downstream features: heel-strike/toe-off
detection, stance/swing phase durations, and knee angles.

Conventions
-----------
- Source signals are 3-D joint displacements sampled at 30 FPS; only the
  y (vertical) axis enters modeling, x/z are kept for knee angles.
- The normalized cycle grid is t_k = k / T for k = 0..T-1: a gait cycle
  is periodic, so the grid excludes the duplicate endpoint t = 1 and
  resampling interpolates cyclically.
- Knee angle is the inner angle at the knee, arccos of the normalized
  dot product of (hip - knee) and (ankle - knee), reported in degrees.

All operations are pure and safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, filtfilt, find_peaks

from .errors import ValidationError

FRAME_RATE = 30.0
DEFAULT_GRID_POINTS = 400

JOINTS = ("hip", "knee", "ankle")
SIDES = ("right", "left")
# Canonical output ordering of the six modeled channels.
CHANNELS = ("hip_right", "hip_left", "knee_right", "knee_left",
            "ankle_right", "ankle_left")

DEFAULT_FILTER_CUTOFF_HZ = 6.0
DEFAULT_FILTER_ORDER = 4
ALLOWED_FILTER_ORDERS = (2, 4, 6)

PROMINENCE_FRACTION = 0.2
MIN_EVENT_SPACING = 0.15
FLAT_SIGNAL_PTP = 1e-9


@dataclass
class JointTrajectory3D:
    """(x, y, z) displacement samples of one joint at 30 FPS.

    gap_mask marks samples that were missing in the source and later
    imputed; it is carried for provenance and round-tripping.
    """

    joint: str
    side: str
    samples: np.ndarray
    gap_mask: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.joint not in JOINTS:
            raise ValidationError(f"unknown joint label {self.joint!r}")
        if self.side not in SIDES:
            raise ValidationError(f"unknown side label {self.side!r}")
        if self.samples.ndim != 2 or self.samples.shape[1] != 3:
            raise ValidationError("samples must have shape (N, 3)")
        if self.samples.shape[0] < 2:
            raise ValidationError("trajectory needs at least 2 samples")
        if self.gap_mask is not None:
            self.gap_mask = np.asarray(self.gap_mask, dtype=bool)
            if self.gap_mask.shape != self.samples.shape:
                raise ValidationError("gap_mask must match samples shape")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def y(self) -> np.ndarray:
        return self.samples[:, 1]


@dataclass
class TrajectorySet:
    """One cycle's six y-channels on the normalized T-point grid.

    channel_means/channel_stds hold the per-subject normalization
    constants so values can be mapped back to raw units.
    """

    subject_id: str
    cycle_index: int
    grid: np.ndarray
    channels: np.ndarray
    channel_means: np.ndarray | None = None
    channel_stds: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float).ravel()
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=float))
        if self.channels.shape[0] != len(CHANNELS):
            raise ValidationError(
                f"expected {len(CHANNELS)} channels, got {self.channels.shape[0]}")
        if self.channels.shape[1] != self.grid.shape[0]:
            raise ValidationError("channel length must match grid length")
        if self.grid.shape[0] < 2:
            raise ValidationError("grid needs at least 2 points")
        if np.any(self.grid < 0.0) or np.any(self.grid > 1.0):
            raise ValidationError("grid must lie within [0, 1]")
        steps = np.diff(self.grid)
        if np.max(np.abs(steps - steps[0])) > 1e-12 or steps[0] <= 0.0:
            raise ValidationError("grid must be uniform and increasing")
        if not np.all(np.isfinite(self.channels)):
            raise ValidationError("channel values must be finite")

    @property
    def num_points(self) -> int:
        return self.grid.shape[0]

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.channels[CHANNELS.index(name)]
        except ValueError:
            raise ValidationError(f"unknown channel {name!r}")


@dataclass
class GaitEvents:
    """Heel-strike and toe-off times of one side, in normalized time."""

    heel_strikes: np.ndarray
    toe_offs: np.ndarray
    side: str | None = None

    def __post_init__(self):
        self.heel_strikes = np.asarray(self.heel_strikes, dtype=float).ravel()
        self.toe_offs = np.asarray(self.toe_offs, dtype=float).ravel()
        for name, arr in (("heel_strikes", self.heel_strikes),
                          ("toe_offs", self.toe_offs)):
            if arr.size and np.any(np.diff(arr) <= 0.0):
                raise ValidationError(f"{name} must be strictly increasing")
            if arr.size and (np.min(arr) < 0.0 or np.max(arr) > 1.0):
                raise ValidationError(f"{name} must lie within [0, 1]")


@dataclass
class PhaseDurations:
    """Stance/swing durations per cycle, one side, normalized-time units."""

    stance: np.ndarray
    swing: np.ndarray
    side: str | None = None

    def __post_init__(self):
        self.stance = np.asarray(self.stance, dtype=float).ravel()
        self.swing = np.asarray(self.swing, dtype=float).ravel()
        if (self.stance.size and np.any(self.stance <= 0.0)) or \
                (self.swing.size and np.any(self.swing <= 0.0)):
            raise ValidationError("durations must be positive")


def lowpass_filter(traj: JointTrajectory3D,
                   cutoff_hz: float = DEFAULT_FILTER_CUTOFF_HZ,
                   order: int = DEFAULT_FILTER_ORDER,
                   frame_rate: float = FRAME_RATE) -> JointTrajectory3D:
    """Zero-phase Butterworth low-pass, applied per axis (DC gain 1)."""
    nyquist = frame_rate / 2.0
    if not 0.0 < cutoff_hz < nyquist:
        raise ValidationError(
            f"cutoff must lie in (0, {nyquist}) Hz, got {cutoff_hz}")
    if order not in ALLOWED_FILTER_ORDERS:
        raise ValidationError(
            f"order must be one of {ALLOWED_FILTER_ORDERS}, got {order}")
    b, a = butter(order, cutoff_hz, btype="low", fs=frame_rate)
    # filtfilt pads with 3 * (order + 1) samples on each side.
    min_len = 3 * (order + 1) + 1
    if len(traj) < min_len:
        raise ValidationError(
            f"signal too short to filter: {len(traj)} < {min_len} samples")
    filtered = filtfilt(b, a, traj.samples, axis=0)
    return JointTrajectory3D(joint=traj.joint, side=traj.side,
                             samples=filtered, gap_mask=traj.gap_mask)


def impute_missing(traj: JointTrajectory3D) -> JointTrajectory3D:
    """Fill NaN gaps by linear interpolation, holding edge values.

    Gap runs must be shorter than one third of the sequence; longer runs
    raise, recommending the cycle be excluded.
    """
    samples = traj.samples.copy()
    n = samples.shape[0]
    mask = ~np.isfinite(samples)
    for axis in range(3):
        gap = mask[:, axis]
        if not np.any(gap):
            continue
        run = _longest_run(gap)
        if 3 * run >= n:
            raise ValidationError(
                f"{traj.joint}_{traj.side}: gap run of {run} samples is >= "
                f"1/3 of the sequence ({n}); exclude this cycle")
        good = np.nonzero(~gap)[0]
        idx = np.arange(n, dtype=float)
        # np.interp holds the first/last known value at the edges.
        samples[gap, axis] = np.interp(idx[gap], idx[good], samples[good, axis])
    new_mask = mask if traj.gap_mask is None else (mask | traj.gap_mask)
    return JointTrajectory3D(joint=traj.joint, side=traj.side,
                             samples=samples, gap_mask=new_mask)


def _longest_run(flags: np.ndarray) -> int:
    longest = current = 0
    for value in flags:
        current = current + 1 if value else 0
        longest = max(longest, current)
    return longest


def _resample_cyclic(values: np.ndarray, num_points: int) -> np.ndarray:
    """Linear resampling onto k/num_points, treating the cycle as periodic."""
    length = values.shape[0]
    positions = np.arange(length, dtype=float) / length
    targets = np.arange(num_points, dtype=float) / num_points
    return np.interp(targets, positions, values, period=1.0)


def normalize_and_align(cycles, subject_id: str = "",
                        num_points: int = DEFAULT_GRID_POINTS) -> list[TrajectorySet]:
    """Align cycles onto the T-point grid and z-score per subject.

    Parameters
    ----------
    cycles : list of (6, L_c) arrays
        Variable-length y-signals per cycle, channels in CHANNELS order.

    Returns
    -------
    One TrajectorySet per input cycle. Channels are resampled onto the
    uniform grid and then z-scored against the subject's pooled cycles,
    so each channel has mean 0 and variance 1 across the returned sets.
    """
    if num_points < 2:
        raise ValidationError("num_points must be >= 2")
    cycles = [np.atleast_2d(np.asarray(c, dtype=float)) for c in cycles]
    if not cycles:
        raise ValidationError("at least one cycle is required")
    for i, cycle in enumerate(cycles):
        if cycle.shape[0] != len(CHANNELS):
            raise ValidationError(
                f"cycle {i}: expected {len(CHANNELS)} channels, got {cycle.shape[0]}")
        if cycle.shape[1] < 10:
            raise ValidationError(
                f"cycle {i}: length {cycle.shape[1]} < 10 samples")
        if not np.all(np.isfinite(cycle)):
            raise ValidationError(f"cycle {i}: non-finite values")

    resampled = [
        np.stack([_resample_cyclic(cycle[ch], num_points)
                  for ch in range(len(CHANNELS))])
        for cycle in cycles
    ]
    pooled = np.concatenate(resampled, axis=1)
    means = pooled.mean(axis=1)
    stds = pooled.std(axis=1)
    flat = np.nonzero(stds < 1e-12)[0]
    if flat.size:
        raise ValidationError(
            f"zero-variance channel(s): {[CHANNELS[i] for i in flat]}")

    grid = np.arange(num_points, dtype=float) / num_points
    sets = []
    for index, cycle in enumerate(resampled):
        normalized = (cycle - means[:, None]) / stds[:, None]
        sets.append(TrajectorySet(
            subject_id=subject_id, cycle_index=index, grid=grid,
            channels=normalized, channel_means=means.copy(),
            channel_stds=stds.copy()))
    return sets


def detect_events(values, grid=None,
                  prominence_fraction: float = PROMINENCE_FRACTION,
                  min_spacing: float = MIN_EVENT_SPACING,
                  side: str | None = None) -> GaitEvents:
    """Heel strikes (local minima) and toe-offs (local maxima) of an
    ankle height signal over one normalized cycle.

    The cycle is treated as periodic: extrema sitting near the grid
    boundary get their prominence from the wrapped-around signal, not
    from the truncated window. Peaks must reach a prominence of
    ``prominence_fraction`` times the signal's peak-to-peak range and be
    at least ``min_spacing`` normalized-time apart. When the merged
    event sequence fails to alternate, the more extreme event of each
    same-type run is kept. A flat signal yields empty lists.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.shape[0] < 5:
        raise ValidationError("signal must have at least 5 samples")
    if not np.all(np.isfinite(values)):
        raise ValidationError("signal must be finite")
    if grid is None:
        grid = np.arange(values.shape[0], dtype=float) / values.shape[0]
    else:
        grid = np.asarray(grid, dtype=float).ravel()
        if grid.shape != values.shape:
            raise ValidationError("grid length must match signal length")

    ptp = float(np.max(values) - np.min(values))
    if ptp < FLAT_SIGNAL_PTP:
        return GaitEvents(heel_strikes=[], toe_offs=[], side=side)

    n = values.shape[0]
    step = float(grid[1] - grid[0])
    distance = max(1.0, min_spacing / step)
    prominence = prominence_fraction * ptp

    def periodic_peaks(signal: np.ndarray) -> np.ndarray:
        tiled = np.concatenate([signal, signal, signal])
        peaks, _ = find_peaks(tiled, prominence=prominence,
                              distance=distance)
        middle = peaks[(peaks >= n) & (peaks < 2 * n)]
        return middle - n

    maxima = periodic_peaks(values)
    minima = periodic_peaks(-values)

    # Enforce alternation: within a same-type run keep the extreme event.
    merged = sorted([(i, 1) for i in maxima] + [(i, 0) for i in minima])
    kept: list[tuple[int, int]] = []
    for idx, kind in merged:
        if kept and kept[-1][1] == kind:
            prev_idx = kept[-1][0]
            better = (values[idx] > values[prev_idx]) if kind == 1 \
                else (values[idx] < values[prev_idx])
            if better:
                kept[-1] = (idx, kind)
        else:
            kept.append((idx, kind))

    heel = [grid[i] for i, kind in kept if kind == 0]
    toe = [grid[i] for i, kind in kept if kind == 1]
    return GaitEvents(heel_strikes=heel, toe_offs=toe, side=side)


def phase_durations(events: GaitEvents) -> PhaseDurations:
    """Stance (heel strike -> next toe-off) and swing (toe-off -> next
    heel strike) durations, in time order.

    The trailing phase is truncated by the end of the recording, so the
    two lists may differ in length by one.
    """
    merged = sorted(
        [(float(t), 0) for t in events.heel_strikes]
        + [(float(t), 1) for t in events.toe_offs])
    offending = [i for i in range(1, len(merged))
                 if merged[i][1] == merged[i - 1][1]]
    if offending:
        raise ValidationError(
            f"events do not alternate at merged indices {offending}")

    stance, swing = [], []
    for (t0, kind0), (t1, kind1) in zip(merged, merged[1:]):
        if kind0 == 0 and kind1 == 1:
            stance.append(t1 - t0)
        elif kind0 == 1 and kind1 == 0:
            swing.append(t1 - t0)
    if not stance:
        raise ValidationError(
            "no heel-strike -> toe-off pair found; cannot compute phases")
    return PhaseDurations(stance=stance, swing=swing, side=events.side)


def knee_angle(hip: JointTrajectory3D, knee: JointTrajectory3D,
               ankle: JointTrajectory3D) -> np.ndarray:
    """Inner knee angle per sample, in degrees within [0, 180].

    angle(t) = arccos( <hip-knee, ankle-knee> / (|hip-knee| |ankle-knee|) ).
    """
    if not (len(hip) == len(knee) == len(ankle)):
        raise ValidationError("hip, knee and ankle must have equal lengths")
    thigh = hip.samples - knee.samples
    shank = ankle.samples - knee.samples
    norm_t = np.linalg.norm(thigh, axis=1)
    norm_s = np.linalg.norm(shank, axis=1)
    bad = np.nonzero((norm_t <= 1e-9) | (norm_s <= 1e-9))[0]
    if bad.size:
        raise ValidationError(
            f"degenerate leg segment at sample index {int(bad[0])}")
    cos = np.sum(thigh * shank, axis=1) / (norm_t * norm_s)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
