"""Drive-session HTTP service.

Long-running advisor for an active tunnel drive. Operators commit one ring
per request (pressures plus the full sensor vector); the service retrains
the residual net from scratch on all committed readings, archives the
reconstructed field for that step, and answers what-if queries about
candidate future pressures without mutating the session.

Concurrency model: one writer per session (commits serialized by a lock),
readers work against immutable archived snapshots and the current model
reference which is swapped atomically at the end of a commit.

JSON conventions: units are spelled out in field names (kPa, mm); errors
use HTTP 400 for validation problems, 404 for unknown ids, 409 when the
session already holds the full number of construction steps.
"""
from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .causal import assemble_hifi, calibrate_noise
from .errors import UndefinedMetricError
from .ground import GroundModel, calibrate_gain, sensor_layout, settlement_field
from .numkit import RngStream
from .opnet import Checkpoint
from .presets import RunConfig
from .studies import r2
from .training import (CompositeModel, TrainConfig, predict_composite_batch,
                       train_residual, zero_residual_model)


@dataclass
class StepArchive:
    """Immutable record of one committed construction step."""

    step: int
    p_g_kpa: float
    p_s_kpa: float
    readings_mm: list[float]
    lf_mm: list[float]
    residual_mm: list[float]
    composite_mm: list[float]
    sensor_r2_composite: float | None
    sensor_r2_lf: float | None
    sensor_mse_composite_mm2: float
    sensor_mse_lf_mm2: float
    retrain_seconds: float


@dataclass
class DriveSession:
    session_id: str
    checkpoint_id: str
    lf: Checkpoint
    seed: int
    model: CompositeModel
    steps: list[StepArchive] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def current_step(self) -> int:
        return len(self.steps)


class AdvisorError(Exception):
    def __init__(self, status: int, detail: str):
        super().__init__(detail)
        self.status = status
        self.detail = detail


class AdvisorService:
    """Session registry plus the domain logic behind every endpoint."""

    def __init__(self, run: RunConfig, checkpoints: dict[str, Checkpoint],
                 oracle: GroundModel | None = None):
        self.run = run
        self.grid = run.grid()
        self.points = self.grid.points()
        self.sensor_idx = sensor_layout(self.grid)
        self.checkpoints = dict(checkpoints)
        self.sessions: dict[str, DriveSession] = {}
        self._create_lock = threading.Lock()
        self._oracle = oracle
        self._oracle_lock = threading.Lock()
        self._next_id = 1

    # -- helpers -------------------------------------------------------------

    @property
    def n_t(self) -> int:
        return self.run.scenario.n_steps

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_idx)

    def oracle(self) -> GroundModel:
        """Calibrated synthetic ground model, built lazily for demo readings."""
        with self._oracle_lock:
            if self._oracle is None:
                self._oracle = calibrate_gain(self.run.ground_model(),
                                              self.run.scenario, self.grid)
            return self._oracle

    def get_session(self, session_id: str) -> DriveSession:
        session = self.sessions.get(session_id)
        if session is None:
            raise AdvisorError(404, f"unknown session {session_id!r}")
        return session

    def _check_pressure(self, name: str, value, bounds) -> float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise AdvisorError(400, f"{name} must be a number")
        v = float(value)
        if not math.isfinite(v) or not (bounds[0] <= v <= bounds[1]):
            raise AdvisorError(
                400, f"{name}={value} outside bounds [{bounds[0]}, {bounds[1]}] kPa")
        return v

    def _check_readings(self, readings) -> np.ndarray:
        n = self.n_sensors
        if not isinstance(readings, (list, tuple)):
            raise AdvisorError(400, "readings_mm must be a list")
        missing = [i for i in range(n) if i >= len(readings)
                   or not isinstance(readings[i], (int, float))
                   or isinstance(readings[i], bool)
                   or not math.isfinite(float(readings[i]))]
        if len(readings) > n:
            raise AdvisorError(
                400, f"readings_mm has {len(readings)} entries, expected {n}")
        if missing:
            raise AdvisorError(
                400, f"incomplete readings, missing or non-finite sensors {missing}")
        return np.asarray([float(v) for v in readings], dtype=np.float64)

    def _pressure_series(self, session: DriveSession,
                         extra: list[tuple[float, float]] = ()):
        p_g = [s.p_g_kpa for s in session.steps] + [pg for pg, _ in extra]
        p_s = [s.p_s_kpa for s in session.steps] + [ps for _, ps in extra]
        return (np.asarray(p_g, dtype=np.float64),
                np.asarray(p_s, dtype=np.float64))

    def sensor_points(self) -> np.ndarray:
        return self.points[self.sensor_idx]

    # -- operations ----------------------------------------------------------

    def create_session(self, checkpoint_id, seed) -> DriveSession:
        if not isinstance(checkpoint_id, str):
            raise AdvisorError(400, "checkpoint_id must be a string")
        if checkpoint_id not in self.checkpoints:
            raise AdvisorError(404, f"unknown checkpoint {checkpoint_id!r}")
        if seed is None:
            seed = 0
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise AdvisorError(400, "seed must be an integer")
        lf = self.checkpoints[checkpoint_id]
        model = zero_residual_model(lf, self.run.residual_width,
                                    self.run.residual_depth)
        with self._create_lock:
            session_id = f"s{self._next_id}"
            self._next_id += 1
            session = DriveSession(session_id=session_id,
                                   checkpoint_id=checkpoint_id,
                                   lf=lf, seed=seed, model=model)
            self.sessions[session_id] = session
        return session

    def session_info(self, session: DriveSession) -> dict:
        sensor_pts = self.sensor_points()
        return {
            "session_id": session.session_id,
            "checkpoint_id": session.checkpoint_id,
            "seed": session.seed,
            "current_step": session.current_step,
            "n_t": self.n_t,
            "n_sensors": self.n_sensors,
            "pg_bounds_kpa": list(self.run.scenario.pg_bounds),
            "ps_bounds_kpa": list(self.run.scenario.ps_bounds),
            "grid": {
                "n_x1": len(self.grid.x1_stations),
                "n_x2": len(self.grid.x2_stations),
                "x1_m": self.grid.x1_stations.tolist(),
                "x2_m": self.grid.x2_stations.tolist(),
            },
            "sensors": [{"sensor_index": j, "grid_index": int(g),
                         "x1_m": float(sensor_pts[j, 0]),
                         "x2_m": float(sensor_pts[j, 1])}
                        for j, g in enumerate(self.sensor_idx)],
        }

    def commit_step(self, session: DriveSession, payload: dict) -> dict:
        spec = self.run.scenario
        p_g = self._check_pressure("p_g_kpa", payload.get("p_g_kpa"), spec.pg_bounds)
        p_s = self._check_pressure("p_s_kpa", payload.get("p_s_kpa"), spec.ps_bounds)
        readings = self._check_readings(payload.get("readings_mm"))
        with session.lock:
            if session.current_step >= self.n_t:
                raise AdvisorError(
                    409, f"session complete at {self.n_t} steps")
            t0 = time.perf_counter()
            t_n = session.current_step + 1
            pg_series, ps_series = self._pressure_series(session, [(p_g, p_s)])
            readings_all = np.vstack(
                [np.asarray([s.readings_mm for s in session.steps],
                            dtype=np.float64).reshape(-1, self.n_sensors),
                 readings[None, :]])
            hf = assemble_hifi(pg_series, ps_series, readings_all,
                               self.sensor_points(), session.lf.norm, self.n_t)
            seed = RngStream(session.seed).split(f"commit/{t_n}").seed
            cfg = TrainConfig(iterations=self.run.online_iterations,
                              batch_size=None, lr=self.run.lr, seed=seed)
            model, _ = train_residual(hf, session.lf, cfg,
                                      self.run.residual_width,
                                      self.run.residual_depth)
            retrain_seconds = time.perf_counter() - t0

            fld = predict_composite_batch(model, pg_series, ps_series, t_n,
                                          self.points)
            sensor_pts = self.sensor_points()
            lf_parts, tot_parts = [], []
            for t in range(1, t_n + 1):
                f = predict_composite_batch(model, pg_series, ps_series, t,
                                            sensor_pts)
                lf_parts.append(f.lf_mm)
                tot_parts.append(f.total_mm)
            fit_lf = np.concatenate(lf_parts)
            fit_tot = np.concatenate(tot_parts)
            flat_read = readings_all.ravel()
            mse_comp = float(np.mean((fit_tot - flat_read) ** 2))
            mse_lf = float(np.mean((fit_lf - flat_read) ** 2))
            try:
                r2_comp = r2(fit_tot, flat_read)
                r2_lf = r2(fit_lf, flat_read)
            except UndefinedMetricError:
                r2_comp = r2_lf = None
            archive = StepArchive(
                step=t_n, p_g_kpa=p_g, p_s_kpa=p_s,
                readings_mm=readings.tolist(),
                lf_mm=fld.lf_mm.tolist(),
                residual_mm=fld.residual_mm.tolist(),
                composite_mm=fld.total_mm.tolist(),
                sensor_r2_composite=r2_comp, sensor_r2_lf=r2_lf,
                sensor_mse_composite_mm2=mse_comp,
                sensor_mse_lf_mm2=mse_lf,
                retrain_seconds=retrain_seconds)
            session.steps.append(archive)
            session.model = model    # atomic reference swap
        return self.field_response(session, archive) | {
            "sensor_fit": {
                "r2_composite": archive.sensor_r2_composite,
                "r2_lf": archive.sensor_r2_lf,
                "mse_composite_mm2": archive.sensor_mse_composite_mm2,
                "mse_lf_mm2": archive.sensor_mse_lf_mm2,
            },
            "retrain_seconds": archive.retrain_seconds,
        }

    def field_response(self, session: DriveSession, archive: StepArchive) -> dict:
        return {
            "session_id": session.session_id,
            "step": archive.step,
            "current_step": session.current_step,
            "p_g_kpa": archive.p_g_kpa,
            "p_s_kpa": archive.p_s_kpa,
            "readings_mm": archive.readings_mm,
            "field": {
                "lf_mm": archive.lf_mm,
                "residual_mm": archive.residual_mm,
                "composite_mm": archive.composite_mm,
            },
        }

    def get_field(self, session: DriveSession, t) -> dict:
        try:
            t = int(t)
        except (TypeError, ValueError):
            raise AdvisorError(400, "t must be an integer")
        if t < 1:
            raise AdvisorError(400, f"t={t} must be at least 1")
        if t > session.current_step:
            raise AdvisorError(
                400, f"t={t} is in the future, current step is "
                     f"{session.current_step}")
        return self.field_response(session, session.steps[t - 1])

    def whatif(self, session: DriveSession, payload: dict) -> dict:
        candidates = payload.get("candidates_kpa")
        if not isinstance(candidates, (list, tuple)) or len(candidates) == 0:
            raise AdvisorError(
                400, "candidates_kpa must be a non-empty list of "
                     "[p_g_kpa, p_s_kpa] pairs")
        spec = self.run.scenario
        parsed = []
        for i, pair in enumerate(candidates):
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise AdvisorError(
                    400, f"candidates_kpa[{i}] must be a [p_g_kpa, p_s_kpa] pair")
            pg = self._check_pressure(f"candidates_kpa[{i}].p_g_kpa", pair[0],
                                      spec.pg_bounds)
            ps = self._check_pressure(f"candidates_kpa[{i}].p_s_kpa", pair[1],
                                      spec.ps_bounds)
            parsed.append((pg, ps))
        # snapshot once so a concurrent commit cannot tear the read
        with session.lock:
            model = session.model
            start = session.current_step
            pg_series, ps_series = self._pressure_series(session, parsed)
        horizon = len(parsed)
        if start + horizon > self.n_t:
            raise AdvisorError(
                400, f"horizon {horizon} overflows the drive, "
                     f"{self.n_t - start} steps remain")
        steps_out = []
        for j in range(1, horizon + 1):
            t = start + j
            fld = predict_composite_batch(model, pg_series, ps_series, t,
                                          self.points)
            steps_out.append({
                "step": t,
                "p_g_kpa": parsed[j - 1][0],
                "p_s_kpa": parsed[j - 1][1],
                "lf_mm": fld.lf_mm.tolist(),
                "residual_mm": fld.residual_mm.tolist(),
                "composite_mm": fld.total_mm.tolist(),
                "max_abs_composite_mm": float(np.max(np.abs(fld.total_mm))),
            })
        return {"session_id": session.session_id, "start_step": start,
                "horizon": horizon, "steps": steps_out}

    def tracking(self, session: DriveSession, x1, x2) -> dict:
        try:
            x1 = float(x1)
            x2 = float(x2)
        except (TypeError, ValueError):
            raise AdvisorError(400, "x1 and x2 must be numbers")
        if not (math.isfinite(x1) and math.isfinite(x2)):
            raise AdvisorError(400, "x1 and x2 must be finite")
        idx = self.grid.nearest_index(x1, x2)
        sensor_pos = np.where(self.sensor_idx == idx)[0]
        sensor_j = int(sensor_pos[0]) if len(sensor_pos) else None
        steps = list(session.steps)
        return {
            "session_id": session.session_id,
            "point": {
                "grid_index": int(idx),
                "x1_m": float(self.points[idx, 0]),
                "x2_m": float(self.points[idx, 1]),
                "is_sensor": sensor_j is not None,
                "sensor_index": sensor_j,
            },
            "steps": [s.step for s in steps],
            "lf_mm": [s.lf_mm[idx] for s in steps],
            "composite_mm": [s.composite_mm[idx] for s in steps],
            "measured_mm": ([s.readings_mm[sensor_j] for s in steps]
                            if sensor_j is not None else None),
        }

    def demo_readings(self, session: DriveSession, payload: dict) -> dict:
        """Fabricate next-step sensor readings from the calibrated oracle.

        Pure helper for driving demos: scales the oracle settlement by k and
        adds noise calibrated to the requested discrepancy level. Does not
        mutate the session; deterministic in (session seed, step, request).
        """
        spec = self.run.scenario
        p_g = self._check_pressure("p_g_kpa", payload.get("p_g_kpa"), spec.pg_bounds)
        p_s = self._check_pressure("p_s_kpa", payload.get("p_s_kpa"), spec.ps_bounds)
        k = payload.get("k", 1.0)
        level = payload.get("target_level", 0.0)
        for name, v in (("k", k), ("target_level", level)):
            if not isinstance(v, (int, float)) or isinstance(v, bool) \
                    or not math.isfinite(float(v)):
                raise AdvisorError(400, f"{name} must be a finite number")
        k = float(k)
        level = float(level)
        if k <= 0:
            raise AdvisorError(400, "k must be positive")
        if level < 0:
            raise AdvisorError(400, "target_level must be non-negative")
        with session.lock:
            t_next = session.current_step + 1
            pg_series, ps_series = self._pressure_series(session, [(p_g, p_s)])
        if t_next > self.n_t:
            raise AdvisorError(409, f"session complete at {self.n_t} steps")
        oracle = self.oracle()
        sensor_pts = self.sensor_points()
        s_l = np.stack([settlement_field(oracle, pg_series, ps_series, t,
                                         sensor_pts)
                        for t in range(1, t_next + 1)])
        try:
            sigma = calibrate_noise(level, k, s_l)
        except ValueError as exc:
            raise AdvisorError(400, str(exc))
        noise = RngStream(session.seed).split(f"demo/{t_next}").normal(
            (self.n_sensors,), 0.0, 1.0) if sigma > 0 else np.zeros(self.n_sensors)
        readings = k * s_l[-1] + sigma * noise
        return {"session_id": session.session_id, "step": t_next,
                "k": k, "target_level": level, "sigma_mm": float(sigma),
                "readings_mm": readings.tolist()}


def create_app(run: RunConfig, checkpoints: dict[str, Checkpoint],
               oracle: GroundModel | None = None):
    """FastAPI application factory over an AdvisorService."""
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse

    service = AdvisorService(run, checkpoints, oracle)
    app = FastAPI(title="settlefusion advisor", version="0.1.0")
    app.state.service = service

    @app.exception_handler(AdvisorError)
    async def _advisor_error(request: Request, exc: AdvisorError):
        return JSONResponse(status_code=exc.status,
                            content={"detail": exc.detail})

    async def _json_body(request: Request) -> dict:
        try:
            body = await request.json()
        except Exception:
            raise AdvisorError(400, "request body must be a JSON object")
        if not isinstance(body, dict):
            raise AdvisorError(400, "request body must be a JSON object")
        return body

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok",
                "checkpoints": sorted(service.checkpoints),
                "sessions": len(service.sessions),
                "n_t": service.n_t,
                "n_sensors": service.n_sensors}

    @app.post("/sessions")
    async def create_session(request: Request):
        body = await _json_body(request)
        session = service.create_session(body.get("checkpoint_id"),
                                         body.get("seed"))
        return service.session_info(session)

    @app.get("/sessions/{session_id}")
    async def session_info(session_id: str):
        return service.session_info(service.get_session(session_id))

    @app.post("/sessions/{session_id}/steps")
    async def commit_step(session_id: str, request: Request):
        session = service.get_session(session_id)
        return service.commit_step(session, await _json_body(request))

    @app.post("/sessions/{session_id}/whatif")
    async def whatif(session_id: str, request: Request):
        session = service.get_session(session_id)
        return service.whatif(session, await _json_body(request))

    @app.post("/sessions/{session_id}/demo-readings")
    async def demo_readings(session_id: str, request: Request):
        session = service.get_session(session_id)
        return service.demo_readings(session, await _json_body(request))

    @app.get("/sessions/{session_id}/field")
    async def get_field(session_id: str, t: str | None = None):
        session = service.get_session(session_id)
        return service.get_field(session, t)

    @app.get("/sessions/{session_id}/tracking")
    async def tracking(session_id: str, x1: str | None = None,
                       x2: str | None = None):
        session = service.get_session(session_id)
        return service.tracking(session, x1, x2)

    return app
