"""Command-line front end for the gait-analysis pipeline.

Subcommands: ``synth``, ``preprocess``, ``fit``, ``predict``,
``segment``, ``evaluate``, ``export-plots``. Settings come from flat
key=value config files (``--config``) overridden by CLI flags; unknown
config keys are rejected. File paths are given as flags.

Every run is deterministic given (config, seed): outputs carry schema
versions, are written atomically, and contain no timestamps. Exit
status is 0 on success, 2 on validation errors, 3 on numeric failures;
errors also emit a machine-readable JSON document on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import dataio, hmm, metrics, mogp
from .errors import NumericError, ValidationError
from .gait_signal import (CHANNELS, GaitEvents, detect_events,
                          phase_durations)
from .serialize import (atomic_write_text, format_float, read_document,
                        write_document)

SEGMENT_REPORT_SCHEMA_ID = "segment-report-v1"

_EVENTS_SCHEMA = {
    "type": "object",
    "required": ["heel_strikes", "toe_offs"],
    "additionalProperties": False,
    "properties": {
        "heel_strikes": {"type": "array", "items": {"type": "number"}},
        "toe_offs": {"type": "array", "items": {"type": "number"}},
    },
}

_PHASES_SCHEMA = {
    "type": "object",
    "required": ["stance", "swing"],
    "additionalProperties": False,
    "properties": {
        "stance": {"type": "array", "items": {"type": "number"}},
        "swing": {"type": "array", "items": {"type": "number"}},
    },
}

# JSON Schema (draft-07) of the segment report document.
SEGMENT_REPORT_JSONSCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema", "grid_points", "observation_source",
                 "segment_threshold", "subjects"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SEGMENT_REPORT_SCHEMA_ID},
        "grid_points": {"type": "integer", "minimum": 2},
        "observation_source": {"enum": ["raw", "mogp-predicted"]},
        "segment_threshold": {"type": "number", "minimum": 0},
        "subjects": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["subject_id", "cohort", "states", "log_joint",
                             "events", "phases", "anomalous_segments",
                             "notes"],
                "additionalProperties": False,
                "properties": {
                    "subject_id": {"type": "string"},
                    "cohort": {"enum": ["control", "disorder"]},
                    "states": {
                        "type": "array",
                        "items": {"type": "integer",
                                  "minimum": 1, "maximum": 4},
                    },
                    "log_joint": {"type": "number"},
                    "events": {
                        "type": "object",
                        "required": ["right", "left"],
                        "additionalProperties": False,
                        "properties": {"right": _EVENTS_SCHEMA,
                                       "left": _EVENTS_SCHEMA},
                    },
                    "phases": {
                        "type": "object",
                        "required": ["right", "left"],
                        "additionalProperties": False,
                        "properties": {"right": _PHASES_SCHEMA,
                                       "left": _PHASES_SCHEMA},
                    },
                    "anomalous_segments": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["start_time", "end_time",
                                         "state_label"],
                            "additionalProperties": False,
                            "properties": {
                                "start_time": {"type": "number"},
                                "end_time": {"type": "number"},
                                "state_label": {"enum": ["s3", "s4"]},
                            },
                        },
                    },
                    "notes": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
    },
}


@dataclass
class RunConfig:
    """Merged settings of one CLI run (defaults < config file < flags)."""

    subcommand: str = ""
    input_path: str | None = None
    output_path: str | None = None
    model_path: str | None = None
    mogp_dir: str | None = None
    hmm_path: str | None = None
    # optimizer
    iterations: int = 2000
    learning_rate: float = 7.5e-3
    weight_decay: float = 1e-4
    seed: int = 0
    # kernel / initialization
    rank: int = 2
    init_variance: float = 1.0
    init_lengthscale: float = 0.2
    init_period: float = 1.0
    init_w_std: float = 0.5
    init_kappa: float = 0.5
    init_noise_variance: float = 0.1
    # preprocessing / data
    grid_points: int = 400
    filter_cutoff_hz: float | None = 6.0
    filter_order: int = 4
    points_per_channel: int = 50
    scope: str = "subject"
    # synthetic corpus
    subjects_per_cohort: int = 2
    cycles_per_subject: int = 3
    noise_level: float = 0.002
    anomaly_side: str = "left"
    anomaly_phase: float = 0.55
    anomaly_shift: float = 0.05
    anomaly_duration: float = 0.25
    # HMM
    em_iterations: int = 100
    em_tol: float = 1e-6
    update_initial_probs: bool = False
    update_transitions: bool = False
    observation_source: str = "mogp-predicted"
    segment_threshold: float = 1.5
    # metric toggles
    metrics_normalized: bool = True
    metrics_raw: bool = True
    verbose: bool = False

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if not self.learning_rate > 0.0:
            raise ValidationError("learning_rate must be positive")
        if self.weight_decay < 0.0:
            raise ValidationError("weight_decay must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")
        if self.rank < 1:
            raise ValidationError("rank must be >= 1")
        if self.grid_points < 2:
            raise ValidationError("grid_points must be >= 2")
        if self.points_per_channel < 2:
            raise ValidationError("points_per_channel must be >= 2")
        if self.scope not in ("subject", "pooled"):
            raise ValidationError("scope must be 'subject' or 'pooled'")
        if self.filter_cutoff_hz is not None and not self.filter_cutoff_hz > 0:
            raise ValidationError("filter_cutoff_hz must be positive or none")
        if self.filter_order not in (2, 4, 6):
            raise ValidationError("filter_order must be one of 2, 4, 6")
        if self.em_iterations < 0:
            raise ValidationError("em_iterations must be >= 0")
        if not self.em_tol > 0.0:
            raise ValidationError("em_tol must be positive")
        if self.observation_source not in ("raw", "mogp-predicted"):
            raise ValidationError(
                "observation_source must be 'raw' or 'mogp-predicted'")
        if self.segment_threshold < 0.0:
            raise ValidationError("segment_threshold must be >= 0")
        if not (self.metrics_normalized or self.metrics_raw):
            raise ValidationError("at least one metric unit system required")
        for name in ("init_variance", "init_lengthscale", "init_period",
                     "init_kappa", "init_noise_variance"):
            if not getattr(self, name) > 0.0:
                raise ValidationError(f"{name} must be positive")
        if self.init_w_std < 0.0:
            raise ValidationError("init_w_std must be >= 0")
        # Synthetic settings validated by SynthConfig when used.


_PATH_KEYS = ("input_path", "output_path", "model_path", "mogp_dir",
              "hmm_path", "subcommand")


def _config_value_from_text(name: str, kind, text: str):
    if name == "filter_cutoff_hz":
        return None if text.lower() in ("none", "off") else float(text)
    if kind is bool or kind == "bool":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"config key {name}: not a boolean: {text!r}")
    try:
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
    except ValueError:
        raise ValidationError(f"config key {name}: not a number: {text!r}")
    return text


_SETTING_KINDS = {
    "iterations": int, "learning_rate": float, "weight_decay": float,
    "seed": int, "rank": int, "init_variance": float,
    "init_lengthscale": float, "init_period": float, "init_w_std": float,
    "init_kappa": float, "init_noise_variance": float, "grid_points": int,
    "filter_cutoff_hz": float, "filter_order": int,
    "points_per_channel": int, "scope": str, "subjects_per_cohort": int,
    "cycles_per_subject": int, "noise_level": float, "anomaly_side": str,
    "anomaly_phase": float, "anomaly_shift": float,
    "anomaly_duration": float, "em_iterations": int, "em_tol": float,
    "update_initial_probs": bool, "update_transitions": bool,
    "observation_source": str, "segment_threshold": float,
    "metrics_normalized": bool, "metrics_raw": bool, "verbose": bool,
}


def _apply_config_file(cfg: RunConfig, path: str) -> None:
    entries = read_document(path)
    for key, text in entries.items():
        if key not in _SETTING_KINDS:
            raise ValidationError(f"{path}: unknown config key {key!r}")
        setattr(cfg, key, _config_value_from_text(
            key, _SETTING_KINDS[key], text))


def _apply_flags(cfg: RunConfig, args: argparse.Namespace) -> None:
    for key in list(_SETTING_KINDS) + list(_PATH_KEYS):
        value = getattr(args, key, None)
        if value is None:
            continue
        if key == "filter_cutoff_hz" and isinstance(value, str):
            value = _config_value_from_text(key, float, value)
        setattr(cfg, key, value)


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(subcommand=args.subcommand)
    if getattr(args, "config", None):
        _apply_config_file(cfg, args.config)
    _apply_flags(cfg, args)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Shared helpers.


def _output_names(num_outputs: int) -> tuple[str, ...]:
    if num_outputs == len(CHANNELS):
        return CHANNELS
    return tuple(f"output_{m}" for m in range(num_outputs))


def _require(value, flag: str):
    if value is None:
        raise ValidationError(f"missing required flag {flag}")
    return value


def _load_corpus(cfg: RunConfig) -> list[dataio.SubjectRecord]:
    return dataio.load_corpus(
        _require(cfg.input_path, "--input"),
        filter_cutoff_hz=cfg.filter_cutoff_hz,
        filter_order=cfg.filter_order,
        num_points=cfg.grid_points)


def _optimizer_config(cfg: RunConfig) -> mogp.OptimizerConfig:
    return mogp.OptimizerConfig(
        iterations=cfg.iterations, learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay, seed=cfg.seed, rank=cfg.rank,
        init_variance=cfg.init_variance,
        init_lengthscale=cfg.init_lengthscale, init_period=cfg.init_period,
        init_w_std=cfg.init_w_std, init_kappa=cfg.init_kappa,
        init_noise_variance=cfg.init_noise_variance)


def _training_set_from_records(records, points_per_channel: int,
                               rng: np.random.Generator) -> mogp.TrainingSet:
    """Subsample a stacked training set, per channel, over all cycles."""
    times, outputs, values = [], [], []
    for m in range(len(CHANNELS)):
        pool_t, pool_v = [], []
        for record in records:
            for cycle in record.cycles:
                pool_t.append(cycle.grid)
                pool_v.append(cycle.channels[m])
        pool_t = np.concatenate(pool_t)
        pool_v = np.concatenate(pool_v)
        if points_per_channel < pool_t.shape[0]:
            idx = np.sort(rng.choice(pool_t.shape[0], points_per_channel,
                                     replace=False))
            pool_t, pool_v = pool_t[idx], pool_v[idx]
        times.append(pool_t)
        outputs.append(np.full(pool_t.shape[0], m, dtype=int))
        values.append(pool_v)
    return mogp.TrainingSet(times=np.concatenate(times),
                            outputs=np.concatenate(outputs),
                            values=np.concatenate(values),
                            num_outputs=len(CHANNELS))


def _write_fit_log(path, model: mogp.MoGPModel) -> None:
    trace = list(getattr(model, "lml_trace", []) or [])
    if not trace:
        trace = [mogp.log_marginal_likelihood(model)]
    lines = ["# schema=fitlog-v1", "iteration,lml"]
    lines.extend(f"{i},{format_float(v)}" for i, v in enumerate(trace))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _write_json(path, document: dict) -> None:
    atomic_write_text(path, json.dumps(document, sort_keys=True,
                                       indent=2) + "\n")


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_synth(cfg: RunConfig) -> int:
    out = _require(cfg.output_path, "--output")
    synth = dataio.SynthConfig(
        seed=cfg.seed, subjects_per_cohort=cfg.subjects_per_cohort,
        cycles_per_subject=cfg.cycles_per_subject,
        noise_level=cfg.noise_level,
        anomaly=dataio.AnomalySpec(
            affected_side=cfg.anomaly_side, phase=cfg.anomaly_phase,
            amplitude_shift=cfg.anomaly_shift,
            duration_fraction=cfg.anomaly_duration))
    records = dataio.generate_synthetic(synth, num_points=cfg.grid_points)
    dataio.save_corpus(records, out)
    print(f"wrote {len(records)} subjects "
          f"({cfg.cycles_per_subject} cycles each) to {out}")
    return 0


def cmd_preprocess(cfg: RunConfig) -> int:
    out = _require(cfg.output_path, "--output")
    records = _load_corpus(cfg)
    lines = ["# schema=processed-v1",
             "subject_id,cohort,cycle,position,channel,value"]
    for record in records:
        for cycle in record.cycles:
            for m, name in enumerate(CHANNELS):
                for k in range(cycle.num_points):
                    lines.append(
                        f"{record.subject_id},{record.cohort},"
                        f"{cycle.cycle_index},{k},{name},"
                        f"{format_float(float(cycle.channels[m, k]))}")
    atomic_write_text(out, "\n".join(lines) + "\n")
    print(f"wrote {sum(len(r.cycles) for r in records)} normalized cycles "
          f"from {len(records)} subjects to {out}")
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    out_dir = _require(cfg.output_path, "--output")
    records = _load_corpus(cfg)
    os.makedirs(out_dir, exist_ok=True)
    opt = _optimizer_config(cfg)

    jobs: list[tuple[str, list[dataio.SubjectRecord]]] = []
    if cfg.scope == "subject":
        jobs = [(r.subject_id, [r]) for r in records]
    else:
        jobs = [("pooled", records)]

    for index, (name, group) in enumerate(jobs):
        rng = np.random.default_rng([cfg.seed, index])
        training = _training_set_from_records(
            group, cfg.points_per_channel, rng)
        model = mogp.fit(training, opt)
        mogp.save_model(model, os.path.join(out_dir, f"{name}.mogp"))
        _write_fit_log(os.path.join(out_dir, f"{name}.fitlog.csv"), model)
        final = mogp.log_marginal_likelihood(model)
        print(f"{name}: n={training.size} lml={format_float(final)}")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    out = _require(cfg.output_path, "--output")
    model = mogp.load_model(_require(cfg.model_path, "--model"))
    grid = np.arange(cfg.grid_points, dtype=float) / cfg.grid_points
    pred = mogp.predict(model, grid)
    names = _output_names(model.num_outputs)
    header = "time," + ",".join(f"{n}_mean,{n}_std" for n in names)
    lines = ["# schema=predict-v1", header]
    for k in range(grid.shape[0]):
        cells = [format_float(float(grid[k]))]
        for m in range(len(names)):
            cells.append(format_float(float(pred.mean[m, k])))
            cells.append(format_float(float(pred.std[m, k])))
        lines.append(",".join(cells))
    atomic_write_text(out, "\n".join(lines) + "\n")
    print(f"wrote predictions on {cfg.grid_points} grid points to {out}")
    return 0


def _events_payload(events: GaitEvents) -> dict:
    return {"heel_strikes": [float(t) for t in events.heel_strikes],
            "toe_offs": [float(t) for t in events.toe_offs]}


def _bilateral_deviation(obs: np.ndarray) -> np.ndarray:
    """Per-step bilateral-symmetry deviation, in robust per-subject units.

    In symmetric gait the left signal is the right signal shifted by
    half a cycle, so the first harmonics of right(t) + left(t) cancel
    and the sum stays within a narrow band; a single-side level shift
    breaks the cancellation. The deviation is |sum - median(sum)|
    scaled by 1.4826 * MAD(sum).
    """
    total = obs[:, 0] + obs[:, 1]
    center = float(np.median(total))
    scale = 1.4826 * float(np.median(np.abs(total - center)))
    return np.abs(total - center) / max(scale, 1e-12)


def _apply_decision_rule(decoded: hmm.DecodedStates, grid: np.ndarray,
                         deviation: np.ndarray, threshold: float):
    """Reported segments under the default decision rule.

    A decoded-abnormal step is reported only when its bilateral
    deviation exceeds ``threshold``; reported segments are the maximal
    runs of surviving steps. Threshold 0 reports every decoded
    abnormal run unchanged.
    """
    if threshold == 0.0:
        return hmm.anomalous_segments(decoded, grid)
    keep = np.isin(decoded.states, hmm.ABNORMAL_STATES) \
        & (deviation > threshold)
    # Re-use the run extraction by masking suppressed steps to state 1.
    masked = np.where(keep, decoded.states, 1)
    gated = hmm.DecodedStates(states=masked, log_joint=decoded.log_joint)
    return hmm.anomalous_segments(gated, grid)


def _segment_subject(cfg: RunConfig, record: dataio.SubjectRecord,
                     index: int, shared_hmm: hmm.HmmModel | None) -> dict:
    grid = record.cycles[0].grid
    notes: list[str] = []

    if cfg.observation_source == "mogp-predicted":
        model = None
        if cfg.mogp_dir is not None:
            path = os.path.join(cfg.mogp_dir, f"{record.subject_id}.mogp")
            if not os.path.exists(path):
                raise ValidationError(f"missing model file: {path}")
            model = mogp.load_model(path)
        else:
            rng = np.random.default_rng([cfg.seed, index])
            training = _training_set_from_records(
                [record], cfg.points_per_channel, rng)
            model = mogp.fit(training, _optimizer_config(cfg))
        pred = mogp.predict(model, grid)
        right = pred.mean[CHANNELS.index("ankle_right")]
        left = pred.mean[CHANNELS.index("ankle_left")]
    else:
        stacked = np.mean([c.channels for c in record.cycles], axis=0)
        right = stacked[CHANNELS.index("ankle_right")]
        left = stacked[CHANNELS.index("ankle_left")]

    obs = hmm.ObservationSequence(
        steps=np.column_stack([right, left]),
        source=cfg.observation_source)
    if shared_hmm is not None:
        hmm_model = shared_hmm
    else:
        init = hmm.init_emissions_from_data(hmm.default_model(), [obs])
        hmm_model = hmm.baum_welch_fit(init, [obs], hmm.BaumWelchConfig(
            max_iterations=cfg.em_iterations, tol=cfg.em_tol,
            update_initial_probs=cfg.update_initial_probs,
            update_transitions=cfg.update_transitions))
    decoded = hmm.viterbi_decode(hmm_model, obs)
    segments = _apply_decision_rule(
        decoded, grid, _bilateral_deviation(obs.steps),
        cfg.segment_threshold)

    events_doc, phases_doc = {}, {}
    for side, curve in (("right", right), ("left", left)):
        events = detect_events(curve, grid, side=side)
        events_doc[side] = _events_payload(events)
        try:
            phases = phase_durations(events)
            phases_doc[side] = {
                "stance": [float(d) for d in phases.stance],
                "swing": [float(d) for d in phases.swing]}
        except ValidationError as exc:
            notes.append(f"{side}: phase durations unavailable ({exc})")
            phases_doc[side] = {"stance": [], "swing": []}

    return {
        "subject_id": record.subject_id,
        "cohort": record.cohort,
        "states": [int(s) for s in decoded.states],
        "log_joint": float(decoded.log_joint),
        "events": events_doc,
        "phases": phases_doc,
        "anomalous_segments": [
            {"start_time": float(seg.start_time),
             "end_time": float(seg.end_time),
             "state_label": seg.state_label}
            for seg in segments],
        "notes": notes,
    }


def cmd_segment(cfg: RunConfig) -> int:
    out = _require(cfg.output_path, "--output")
    records = _load_corpus(cfg)
    shared_hmm = None
    if cfg.hmm_path is not None:
        shared_hmm = hmm.load_model(cfg.hmm_path)

    subjects = []
    for index, record in enumerate(
            sorted(records, key=lambda r: r.subject_id)):
        payload = _segment_subject(cfg, record, index, shared_hmm)
        subjects.append(payload)
        print(f"{record.subject_id} {record.cohort} "
              f"segments={len(payload['anomalous_segments'])}")

    document = {
        "schema": SEGMENT_REPORT_SCHEMA_ID,
        "grid_points": cfg.grid_points,
        "observation_source": cfg.observation_source,
        "segment_threshold": cfg.segment_threshold,
        "subjects": subjects,
    }
    _write_json(out, document)
    return 0


def _report_items(prefix: str, report: metrics.MetricReport):
    return [(f"{prefix}.{key}", value)
            for key, value in report.as_document().items()
            if key != "schema"]


def cmd_evaluate(cfg: RunConfig) -> int:
    out_dir = _require(cfg.output_path, "--output")
    records = _load_corpus(cfg)
    os.makedirs(out_dir, exist_ok=True)
    splits = dataio.loso_splits(records)
    opt = _optimizer_config(cfg)

    numeric_keys: list[str] = []
    per_split_values: list[dict[str, float]] = []
    for split_index, (train, held) in enumerate(splits):
        rng = np.random.default_rng([cfg.seed, split_index])
        training = _training_set_from_records(
            train, cfg.points_per_channel, rng)
        model = mogp.fit(training, opt)
        grid = held.cycles[0].grid
        pred = mogp.predict(model, grid)
        truth = np.mean([c.channels for c in held.cycles], axis=0)

        items: list[tuple[str, str]] = [
            ("schema", "evaluate-v1"), ("subject_id", held.subject_id)]
        values: dict[str, float] = {}
        if cfg.metrics_normalized:
            report = metrics.compute_report(pred.mean, truth, CHANNELS)
            if cfg.verbose:
                print(f"== {held.subject_id} (normalized)")
                print(report.as_table(), end="")
            for key, text in _report_items("normalized", report):
                items.append((key, text))
                values[key] = float(text)
        if cfg.metrics_raw:
            stds = held.channel_stds[:, None]
            means = held.channel_means[:, None]
            report = metrics.compute_report(
                pred.mean * stds + means, truth * stds + means, CHANNELS)
            if cfg.verbose:
                print(f"== {held.subject_id} (raw)")
                print(report.as_table(), end="")
            for key, text in _report_items("raw", report):
                items.append((key, text))
                values[key] = float(text)

        per_split_values.append(values)
        if not numeric_keys:
            numeric_keys = [k for k, _ in items if k in values]
        write_document(
            os.path.join(out_dir, f"split_{held.subject_id}.metrics"), items)
        print(f"split {held.subject_id}: "
              + " ".join(f"{k}={values[k]:.6f}" for k in
                         ("normalized.mae", "raw.mae") if k in values))

    aggregate_items: list[tuple[str, str]] = [
        ("schema", "evaluate-aggregate-v1"),
        ("splits", str(len(splits)))]
    for key in numeric_keys:
        mean_value = float(np.mean([v[key] for v in per_split_values]))
        aggregate_items.append((key, format_float(mean_value)))
    write_document(os.path.join(out_dir, "aggregate.metrics"),
                   aggregate_items)
    print(f"wrote {len(splits)} split reports and aggregate to {out_dir}")
    return 0


def cmd_export_plots(cfg: RunConfig) -> int:
    out_dir = _require(cfg.output_path, "--output")
    model = mogp.load_model(_require(cfg.model_path, "--model"))
    os.makedirs(out_dir, exist_ok=True)
    grid = np.arange(cfg.grid_points, dtype=float) / cfg.grid_points
    pred = mogp.predict(model, grid)
    names = _output_names(model.num_outputs)

    for m, name in enumerate(names):
        lines = ["# schema=plotband-v1", "time,mean,lower,upper"]
        for k in range(grid.shape[0]):
            mu = float(pred.mean[m, k])
            half = 2.0 * float(pred.std[m, k])
            lines.append(",".join(format_float(v) for v in
                                  (float(grid[k]), mu, mu - half, mu + half)))
        atomic_write_text(os.path.join(out_dir, f"band_{name}.csv"),
                          "\n".join(lines) + "\n")

    matrix, normalized = mogp.export_coregionalization(model)
    for filename, payload in (("coregionalization.csv", matrix),
                              ("coregionalization_normalized.csv",
                               normalized)):
        lines = ["# schema=coreg-v1", "output," + ",".join(names)]
        for m, name in enumerate(names):
            lines.append(name + "," + ",".join(
                format_float(float(v)) for v in payload[m]))
        atomic_write_text(os.path.join(out_dir, filename),
                          "\n".join(lines) + "\n")
    print(f"wrote {len(names)} band files and coregionalization exports "
          f"to {out_dir}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "export-plots": cmd_export_plots,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaitmogp",
        description="Multi-output GP gait modeling and HMM segmentation.")
    subparsers = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", help="flat key=value settings file")
        sub.add_argument("--seed", type=int, help="master RNG seed")
        sub.add_argument("--verbose", action="store_const", const=True,
                         dest="verbose", help="chatty output")

    def add_corpus_flags(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--input", dest="input_path", required=True,
                         help="corpus CSV path")
        sub.add_argument("--filter-cutoff", dest="filter_cutoff_hz",
                         help="Butterworth cutoff in Hz, or 'none'")
        sub.add_argument("--filter-order", dest="filter_order", type=int)
        sub.add_argument("--grid-points", dest="grid_points", type=int)

    sub = subparsers.add_parser("synth", help="generate a synthetic corpus")
    add_common(sub)
    sub.add_argument("--output", dest="output_path", required=True)
    sub.add_argument("--subjects-per-cohort", dest="subjects_per_cohort",
                     type=int)
    sub.add_argument("--cycles-per-subject", dest="cycles_per_subject",
                     type=int)
    sub.add_argument("--noise-level", dest="noise_level", type=float)
    sub.add_argument("--anomaly-side", dest="anomaly_side",
                     choices=("right", "left"))
    sub.add_argument("--anomaly-phase", dest="anomaly_phase", type=float)
    sub.add_argument("--anomaly-shift", dest="anomaly_shift", type=float)
    sub.add_argument("--anomaly-duration", dest="anomaly_duration",
                     type=float)
    sub.add_argument("--grid-points", dest="grid_points", type=int)

    sub = subparsers.add_parser("preprocess",
                                help="normalize a corpus onto the cycle grid")
    add_common(sub)
    add_corpus_flags(sub)
    sub.add_argument("--output", dest="output_path", required=True)

    sub = subparsers.add_parser("fit", help="fit MoGP models")
    add_common(sub)
    add_corpus_flags(sub)
    sub.add_argument("--output", dest="output_path", required=True,
                     help="output directory")
    sub.add_argument("--scope", choices=("subject", "pooled"))
    sub.add_argument("--iterations", type=int)
    sub.add_argument("--learning-rate", dest="learning_rate", type=float)
    sub.add_argument("--weight-decay", dest="weight_decay", type=float)
    sub.add_argument("--rank", type=int)
    sub.add_argument("--points-per-channel", dest="points_per_channel",
                     type=int)

    sub = subparsers.add_parser("predict",
                                help="evaluate a fitted model on a grid")
    add_common(sub)
    sub.add_argument("--model", dest="model_path", required=True)
    sub.add_argument("--output", dest="output_path", required=True)
    sub.add_argument("--grid-points", dest="grid_points", type=int)

    sub = subparsers.add_parser(
        "segment", help="decode gait phases and anomalous segments")
    add_common(sub)
    add_corpus_flags(sub)
    sub.add_argument("--output", dest="output_path", required=True,
                     help="segment report JSON path")
    sub.add_argument("--mogp-dir", dest="mogp_dir",
                     help="directory of fitted per-subject models")
    sub.add_argument("--hmm", dest="hmm_path",
                     help="fitted HMM model file (skips in-run EM)")
    sub.add_argument("--observation-source", dest="observation_source",
                     choices=("raw", "mogp-predicted"))
    sub.add_argument("--iterations", type=int)
    sub.add_argument("--points-per-channel", dest="points_per_channel",
                     type=int)
    sub.add_argument("--em-iterations", dest="em_iterations", type=int)
    sub.add_argument("--segment-threshold", dest="segment_threshold",
                     type=float,
                     help="bilateral-deviation threshold for reporting "
                          "decoded abnormal runs (0 reports all)")

    sub = subparsers.add_parser(
        "evaluate", help="leave-one-subject-out evaluation")
    add_common(sub)
    add_corpus_flags(sub)
    sub.add_argument("--output", dest="output_path", required=True,
                     help="output directory")
    sub.add_argument("--iterations", type=int)
    sub.add_argument("--points-per-channel", dest="points_per_channel",
                     type=int)

    sub = subparsers.add_parser(
        "export-plots", help="export prediction bands and B matrix")
    add_common(sub)
    sub.add_argument("--model", dest="model_path", required=True)
    sub.add_argument("--output", dest="output_path", required=True,
                     help="output directory")
    sub.add_argument("--grid-points", dest="grid_points", type=int)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        return _HANDLERS[cfg.subcommand](cfg)
    except ValidationError as exc:
        _emit_error("validation", 2, exc)
        return 2
    except NumericError as exc:
        _emit_error("numeric", 3, exc)
        return 3


def _emit_error(kind: str, code: int, exc: Exception) -> None:
    document = {"error": str(exc), "type": kind, "exit_code": code}
    print(json.dumps(document, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
