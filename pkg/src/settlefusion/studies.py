"""Measurement-fusion studies and report export.

Each study case fabricates measurements from the ground oracle at the sensor
positions (scale mismatch k plus calibrated white noise), retrains the
residual net online, and scores the reconstructed full-grid field against
the clean monitored trend k * s_oracle. Reports serialize to a nested JSON
document plus flat CSV tables; wall-clock timings go to a separate sidecar
so the canonical outputs are byte-stable for fixed seeds.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .causal import (HfSpec, assemble_hifi, calibrate_noise, l2_error,
                     split_scenario_ids, synthesize_hifi)
from .errors import UndefinedMetricError
from .ground import (GroundModel, Scenario, ScenarioSpec, SurfaceGrid,
                     calibrate_gain, gen_scenario, sensor_layout, settlement_field)
from .numkit import LrSchedule, RngStream
from .opnet import Checkpoint
from .presets import RunConfig
from .training import (TrainConfig, predict_composite_batch, predict_field,
                       train_residual)

SCHEMA_VERSION = 1


def r2(preds: np.ndarray, targets: np.ndarray) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch {preds.shape} != {targets.shape}")
    if preds.size < 2:
        raise UndefinedMetricError("r2 needs at least two samples")
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("r2 undefined for constant targets")
    ss_res = float(np.sum((preds - targets) ** 2))
    return 1.0 - ss_res / ss_tot


@dataclass
class StudyContext:
    """Everything a study needs: oracle, grid, sensors, trained lf checkpoint."""

    scenario_spec: ScenarioSpec
    grid: SurfaceGrid
    model: GroundModel           # calibrated oracle
    lf: Checkpoint
    sensor_idx: np.ndarray
    test_ids: list[int]
    residual_width: int
    residual_depth: int
    online_iterations: int = 200
    lr: LrSchedule = field(default_factory=LrSchedule)
    tracking_a: int = 0          # grid index tracked by the error-type study
    tracking_b: int = 0          # grid index tracked by the error-level study


def build_study_context(run: RunConfig, lf: Checkpoint,
                        model: GroundModel | None = None) -> StudyContext:
    want = 2 * run.scenario.n_steps
    if lf.config.branch_input_dim != want:
        raise ValueError(
            f"checkpoint expects pressure history of dimension "
            f"{lf.config.branch_input_dim}, run config needs {want}")
    grid = run.grid()
    if model is None:
        model = calibrate_gain(run.ground_model(), run.scenario, grid)
    _, _, test_ids = split_scenario_ids(list(range(1, run.n_scenarios + 1)))
    length = run.grid_length_m
    return StudyContext(
        scenario_spec=run.scenario, grid=grid, model=model, lf=lf,
        sensor_idx=sensor_layout(grid), test_ids=test_ids,
        residual_width=run.residual_width, residual_depth=run.residual_depth,
        online_iterations=run.online_iterations, lr=run.lr,
        tracking_a=grid.nearest_index(0.45 * length, 0.0),
        tracking_b=grid.nearest_index(0.75 * length, 0.0),
    )


def oracle_series(ctx: StudyContext, scenario: Scenario, steps,
                  points: np.ndarray) -> np.ndarray:
    """Oracle settlement (mm) for each step in ``steps`` at ``points``."""
    return np.stack([settlement_field(ctx.model, scenario.p_g, scenario.p_s,
                                      int(t), points) for t in steps])


def _error_type_label(k: float) -> str:
    if k < 1.0:
        return "overestimated"
    if k > 1.0:
        return "underestimated"
    return "fluctuated"


@dataclass
class CaseResult:
    case_id: str
    scenario_id: int
    k: float
    error_type: str
    target_level: float
    sigma_mm: float
    realized_level: float
    steps: list[int]                 # evaluation steps (one entry except min-data)
    r2_by_step: list[float]
    lf_r2_by_step: list[float]
    fields: list[dict]               # per step: lf/residual/composite/truth arrays
    profile: dict
    evolution: dict
    train_seconds: float

    @property
    def r2(self) -> float:
        return self.r2_by_step[-1]


@dataclass
class StudyReport:
    study: str
    config: dict
    cases: list[CaseResult]
    diagnostics: dict
    schema_version: int = SCHEMA_VERSION


def _online_config(ctx: StudyContext, seed: int) -> TrainConfig:
    return TrainConfig(iterations=ctx.online_iterations, batch_size=None,
                       lr=ctx.lr, seed=seed)


def _case_seed(study_seed: int, tag: str) -> int:
    return RngStream(study_seed).split(tag).seed


def run_case(ctx: StudyContext, scenario_id: int, k: float, target_level: float,
             t_eval_list: list[int], seed: int, case_id: str,
             tracking_index: int, keep_fields: bool = True) -> CaseResult:
    """Synthesize measurements, retrain the residual per step, score the field."""
    t0 = time.perf_counter()
    scenario = gen_scenario(ctx.scenario_spec, scenario_id)
    pts = ctx.grid.points()
    sensor_pts = pts[ctx.sensor_idx]
    t_max = max(t_eval_list)
    all_steps = np.arange(1, t_max + 1)
    s_l_sensors = oracle_series(ctx, scenario, all_steps, sensor_pts)

    sigma = calibrate_noise(target_level, k, s_l_sensors[: t_eval_list[-1]])
    hf_spec = HfSpec(k=k, sigma_mm=sigma, seed=seed)
    readings = synthesize_hifi(s_l_sensors, hf_spec)

    n_t = ctx.scenario_spec.n_steps
    r2s, lf_r2s, fields = [], [], []
    model = None
    for i, t_n in enumerate(t_eval_list):
        hf = assemble_hifi(scenario.p_g, scenario.p_s, readings[:t_n],
                           sensor_pts, ctx.lf.norm, n_t)
        cfg = _online_config(ctx, _case_seed(seed, f"retrain/{t_n}"))
        model, _ = train_residual(hf, ctx.lf, cfg,
                                  ctx.residual_width, ctx.residual_depth)
        pred = predict_field(model, scenario.p_g, scenario.p_s, t_n, ctx.grid)
        truth = k * settlement_field(ctx.model, scenario.p_g, scenario.p_s,
                                     t_n, pts)
        r2s.append(r2(pred.total_mm, truth))
        lf_r2s.append(r2(pred.lf_mm, truth))
        if keep_fields:
            fields.append({
                "t_eval": t_n,
                "lf_mm": pred.lf_mm.tolist(),
                "residual_mm": pred.residual_mm.tolist(),
                "composite_mm": pred.total_mm.tolist(),
                "truth_mm": truth.tolist(),
            })

    t_final = t_eval_list[-1]
    realized = l2_error(readings[:t_final], s_l_sensors[:t_final])

    # longitudinal profile along the tunnel axis (x2 = 0, i.e. normalized 0.5)
    centre_mask = pts[:, 1] == 0.0
    last_field = fields[-1] if keep_fields else None
    if last_field is None:
        pred = predict_field(model, scenario.p_g, scenario.p_s, t_final, ctx.grid)
        truth = k * settlement_field(ctx.model, scenario.p_g, scenario.p_s,
                                     t_final, pts)
        last_field = {"lf_mm": pred.lf_mm.tolist(),
                      "residual_mm": pred.residual_mm.tolist(),
                      "composite_mm": pred.total_mm.tolist(),
                      "truth_mm": truth.tolist()}
    # the centreline x2 = 0 m maps to normalized 0.5 on the symmetric grid,
    # so the metric and normalized profile conventions pick the same stations
    profile = {
        "x2_m": 0.0,
        "x2_norm": 0.5,
        "x1_m": pts[centre_mask, 0].tolist(),
        "lf_mm": np.asarray(last_field["lf_mm"])[centre_mask].tolist(),
        "composite_mm": np.asarray(last_field["composite_mm"])[centre_mask].tolist(),
        "truth_mm": np.asarray(last_field["truth_mm"])[centre_mask].tolist(),
    }

    # settlement evolution at the tracked point, final model, steps 1..t_final
    track_pt = pts[tracking_index:tracking_index + 1]
    sensor_col = np.where(ctx.sensor_idx == tracking_index)[0]
    evo_steps = list(range(1, t_final + 1))
    evo_lf, evo_comp = [], []
    for t in evo_steps:
        f = predict_composite_batch(model, scenario.p_g, scenario.p_s, t, track_pt)
        evo_lf.append(float(f.lf_mm[0]))
        evo_comp.append(float(f.total_mm[0]))
    truth_series = k * oracle_series(ctx, scenario, evo_steps, track_pt)[:, 0]
    evolution = {
        "point_index": int(tracking_index),
        "x1_m": float(track_pt[0, 0]), "x2_m": float(track_pt[0, 1]),
        "steps": evo_steps,
        "lf_mm": evo_lf,
        "composite_mm": evo_comp,
        "truth_mm": truth_series.tolist(),
        "measured_mm": (readings[:t_final, sensor_col[0]].tolist()
                        if len(sensor_col) else None),
    }

    return CaseResult(
        case_id=case_id, scenario_id=scenario_id, k=k,
        error_type=_error_type_label(k), target_level=target_level,
        sigma_mm=sigma, realized_level=realized,
        steps=[int(t) for t in t_eval_list], r2_by_step=r2s,
        lf_r2_by_step=lf_r2s, fields=fields, profile=profile,
        evolution=evolution, train_seconds=time.perf_counter() - t0,
    )


def run_error_type_study(ctx: StudyContext, t_eval: int = 38,
                         target_level: float = 0.30,
                         ks: tuple = (0.7, 1.3, 1.0),
                         seed: int = 515) -> StudyReport:
    """One case per measurement-error type at a fixed discrepancy level."""
    if len(ctx.test_ids) < len(ks):
        raise ValueError(f"need {len(ks)} held-out scenarios, have {len(ctx.test_ids)}")
    cases = []
    for i, k in enumerate(ks):
        sid = ctx.test_ids[i]
        cases.append(run_case(
            ctx, sid, k, target_level, [t_eval],
            seed=_case_seed(seed, f"etype/{k}/{sid}"),
            case_id=f"type-{_error_type_label(k)}", tracking_index=ctx.tracking_a))
    return StudyReport(
        study="error-type",
        config={"t_eval": t_eval, "target_level": target_level,
                "ks": list(ks), "seed": seed,
                "scenarios": [c.scenario_id for c in cases]},
        cases=cases,
        diagnostics={"min_r2": min(c.r2 for c in cases)},
    )


def run_error_level_study(ctx: StudyContext, t_eval: int = 54,
                          levels_and_ks: tuple = ((0.15, 0.90), (0.35, 0.75),
                                                  (0.55, 0.50)),
                          scenario_id: int | None = None,
                          seed: int = 626) -> StudyReport:
    """Increasing discrepancy levels, overestimated (k < 1) measurements."""
    sid = ctx.test_ids[-1] if scenario_id is None else scenario_id
    cases = []
    for level, k in levels_and_ks:
        cases.append(run_case(
            ctx, sid, k, level, [t_eval],
            seed=_case_seed(seed, f"elevel/{level}"),
            case_id=f"level-{int(round(level * 100))}pc",
            tracking_index=ctx.tracking_b))
    r2s = [c.r2 for c in cases]
    max_settlement = {}
    for c in cases:
        f_ = c.fields[-1]
        max_settlement[c.case_id] = {
            "lf_mm": float(np.max(np.abs(f_["lf_mm"]))),
            "composite_mm": float(np.max(np.abs(f_["composite_mm"]))),
            "monitored_mm": float(np.max(np.abs(f_["truth_mm"]))),
        }
    return StudyReport(
        study="error-level",
        config={"t_eval": t_eval, "levels_and_ks": [list(p) for p in levels_and_ks],
                "scenario": sid, "seed": seed},
        cases=cases,
        diagnostics={"strictly_decreasing": all(a > b for a, b in zip(r2s, r2s[1:])),
                     "max_settlement": max_settlement},
    )


def run_min_data_study(ctx: StudyContext, t_start: int = 15,
                       cases_spec: tuple = ((0.30, 0.7), (0.30, 1.3), (0.30, 1.0),
                                            (0.50, 0.6), (0.50, 1.4), (0.50, 1.0)),
                       seed: int = 737) -> StudyReport:
    """R2 versus the number of construction steps with measurements."""
    n_t = ctx.scenario_spec.n_steps
    if len(ctx.test_ids) < len(cases_spec):
        raise ValueError(f"need {len(cases_spec)} held-out scenarios, "
                         f"have {len(ctx.test_ids)}")
    sweep = list(range(t_start, n_t + 1))
    cases = []
    for i, (level, k) in enumerate(cases_spec):
        sid = ctx.test_ids[i]
        cases.append(run_case(
            ctx, sid, k, level, sweep,
            seed=_case_seed(seed, f"mindata/{level}/{k}"),
            case_id=f"min-{_error_type_label(k)}-{int(round(level * 100))}pc",
            tracking_index=ctx.tracking_a))
    by_type_50 = {c.error_type: float(np.mean(c.r2_by_step))
                  for c in cases if c.target_level == 0.50}
    dominant = (by_type_50.get("underestimated", -np.inf)
                >= max(v for t, v in by_type_50.items() if t != "underestimated"))
    return StudyReport(
        study="min-data",
        config={"sweep": sweep, "cases": [list(p) for p in cases_spec],
                "seed": seed, "scenarios": [c.scenario_id for c in cases]},
        cases=cases,
        diagnostics={"underestimated_dominates_at_50pc": bool(dominant),
                     "mean_r2_by_type_at_50pc": by_type_50},
    )


# -- report serialization -----------------------------------------------------

def report_to_dict(report: StudyReport) -> dict:
    """Canonical JSON-ready form; excludes wall-clock timings."""
    return {
        "schema_version": report.schema_version,
        "study": report.study,
        "config": report.config,
        "diagnostics": report.diagnostics,
        "cases": [{
            "case_id": c.case_id,
            "scenario_id": c.scenario_id,
            "k": c.k,
            "error_type": c.error_type,
            "target_level": c.target_level,
            "sigma_mm": c.sigma_mm,
            "realized_level": c.realized_level,
            "steps": c.steps,
            "r2_by_step": c.r2_by_step,
            "lf_r2_by_step": c.lf_r2_by_step,
            "fields": c.fields,
            "profile": c.profile,
            "evolution": c.evolution,
        } for c in report.cases],
    }


def write_report(report: StudyReport, out_dir, fmt: str = "json") -> list[str]:
    """Write report files into out_dir; returns the file names written."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def emit(name: str, text: str) -> None:
        path = os.path.join(out_dir, name)
        with open(path, "w") as f:
            f.write(text)
        written.append(name)

    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown format {fmt!r}")

    if fmt == "json":
        emit("report.json", json.dumps(report_to_dict(report), indent=2,
                                       sort_keys=True) + "\n")
    else:
        lines = ["case_id,scenario_id,error_type,k,target_level,sigma_mm,"
                 "realized_level,t_eval,r2,lf_r2"]
        for c in report.cases:
            for t, r, lr_ in zip(c.steps, c.r2_by_step, c.lf_r2_by_step):
                lines.append(f"{c.case_id},{c.scenario_id},{c.error_type},"
                             f"{c.k!r},{c.target_level!r},{c.sigma_mm!r},"
                             f"{c.realized_level!r},{t},{r!r},{lr_!r}")
        emit("cases.csv", "\n".join(lines) + "\n")

        lines = ["case_id,t_eval,point_index,lf_mm,residual_mm,composite_mm,truth_mm"]
        for c in report.cases:
            for f_ in c.fields:
                for p, (a, b, cc, d) in enumerate(zip(f_["lf_mm"], f_["residual_mm"],
                                                      f_["composite_mm"], f_["truth_mm"])):
                    lines.append(f"{c.case_id},{f_['t_eval']},{p},{a!r},{b!r},{cc!r},{d!r}")
        emit("field.csv", "\n".join(lines) + "\n")

        lines = ["case_id,x1_m,lf_mm,composite_mm,truth_mm"]
        for c in report.cases:
            pr = c.profile
            for x1, a, b, d in zip(pr["x1_m"], pr["lf_mm"], pr["composite_mm"],
                                   pr["truth_mm"]):
                lines.append(f"{c.case_id},{x1!r},{a!r},{b!r},{d!r}")
        emit("profile.csv", "\n".join(lines) + "\n")

        lines = ["case_id,step,lf_mm,composite_mm,truth_mm,measured_mm"]
        for c in report.cases:
            ev = c.evolution
            measured = ev["measured_mm"] or [None] * len(ev["steps"])
            for s, a, b, d, m in zip(ev["steps"], ev["lf_mm"], ev["composite_mm"],
                                     ev["truth_mm"], measured):
                m_txt = "" if m is None else repr(m)
                lines.append(f"{c.case_id},{s},{a!r},{b!r},{d!r},{m_txt}")
        emit("evolution.csv", "\n".join(lines) + "\n")

    timings = {c.case_id: c.train_seconds for c in report.cases}
    emit("timings.json", json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return written


def parse_report(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {doc.get('schema_version')}")
    return doc
