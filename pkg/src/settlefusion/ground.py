"""Synthetic ground response: pressure scenarios, surface grid, settlement oracle.

The oracle stands in for a numerical ground model. A tunnel face advances one
ring per construction step; each step j deposits a volume-loss increment that
grows when face or grout pressure drops below its operating band, and the
surface settlement at a point is the superposition of Gaussian kernels
centred on the past face positions:

    s(x1, x2, t) = -K * sum_{j<=t} dV_j
                   * exp(-x2^2 / (2 it^2)) * exp(-(x1 - xi_j)^2 / (2 il^2))

with xi_j the face position at step j. dV_j depends on the two pressures
through min-max maps over the configured operating bands, so lowering either
pressure strictly deepens the trough. K is calibrated so a reference
scenario (both pressures held at mid-band) reaches exactly 10 mm of peak
settlement at the final step.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .numkit import RngStream


@dataclass(frozen=True)
class ScenarioSpec:
    """Bounded-random-walk generator settings for operational pressure series."""

    seed: int
    n_steps: int = 64
    pg_bounds: tuple[float, float] = (120.0, 220.0)
    ps_bounds: tuple[float, float] = (100.0, 200.0)
    max_step_kpa: float = 15.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        for name, (lo, hi) in (("pg", self.pg_bounds), ("ps", self.ps_bounds)):
            if not lo < hi:
                raise ValueError(f"{name}_bounds must satisfy lo < hi, got ({lo}, {hi})")
        if self.max_step_kpa < 1.0:
            raise ValueError(f"max_step_kpa must be >= 1, got {self.max_step_kpa}")


@dataclass(frozen=True)
class Scenario:
    scenario_id: int
    p_g: np.ndarray  # grout pressure per step, kPa
    p_s: np.ndarray  # support (face) pressure per step, kPa


def bounded_walk(start: float, deltas: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clamped random walk kernel; with all-zero deltas the series is constant."""
    out = np.empty(len(deltas) + 1)
    out[0] = min(max(start, lo), hi)
    cur = out[0]
    for i, d in enumerate(deltas):
        cur = min(max(cur + d, lo), hi)
        out[i + 1] = cur
    return out


def gen_scenario(spec: ScenarioSpec, scenario_id: int) -> Scenario:
    """Deterministic in (spec.seed, scenario_id); independent of call order."""
    if scenario_id < 1:
        raise ValueError(f"scenario_id must be >= 1, got {scenario_id}")
    rng = RngStream(spec.seed).split(f"scenario/{scenario_id}")
    series = []
    for lo, hi in (spec.pg_bounds, spec.ps_bounds):
        start = float(rng.uniform(lo, hi))
        deltas = rng.uniform(-spec.max_step_kpa, spec.max_step_kpa,
                             shape=spec.n_steps - 1)
        series.append(bounded_walk(start, np.atleast_1d(deltas), lo, hi))
    return Scenario(scenario_id=scenario_id, p_g=series[0], p_s=series[1])


def reference_scenario(spec: ScenarioSpec) -> Scenario:
    """Both pressures held constant at mid-band; used for gain calibration."""
    mid_g = 0.5 * (spec.pg_bounds[0] + spec.pg_bounds[1])
    mid_s = 0.5 * (spec.ps_bounds[0] + spec.ps_bounds[1])
    return Scenario(scenario_id=0,
                    p_g=np.full(spec.n_steps, mid_g),
                    p_s=np.full(spec.n_steps, mid_s))


@dataclass(frozen=True)
class SurfaceGrid:
    x1_stations: tuple[float, ...]
    x2_stations: tuple[float, ...]

    @property
    def n_points(self) -> int:
        return len(self.x1_stations) * len(self.x2_stations)

    def points(self) -> np.ndarray:
        """(n_points, 2) array, x1-major then x2, matching record order."""
        x1 = np.repeat(self.x1_stations, len(self.x2_stations))
        x2 = np.tile(self.x2_stations, len(self.x1_stations))
        return np.column_stack([x1, x2])

    def nearest_index(self, x1: float, x2: float) -> int:
        pts = self.points()
        return int(np.argmin((pts[:, 0] - x1) ** 2 + (pts[:, 1] - x2) ** 2))


def make_grid(n_x1: int = 14, n_x2: int = 9, length_m: float = 104.0,
              width_m: float = 80.0) -> SurfaceGrid:
    """Monitoring grid over the area of interest, centred on the tunnel axis x2=0."""
    if n_x1 < 1 or n_x2 < 1:
        raise ValueError("grid needs at least 1 station per direction")
    x1 = np.linspace(0.0, length_m, n_x1) if n_x1 > 1 else np.array([0.0])
    # a single transverse station sits on the axis to keep x2 symmetric
    x2 = (np.linspace(-width_m / 2.0, width_m / 2.0, n_x2) if n_x2 > 1
          else np.array([0.0]))
    return SurfaceGrid(tuple(float(v) for v in x1), tuple(float(v) for v in x2))


def sensor_layout(grid: SurfaceGrid, indices: list[int] | None = None) -> np.ndarray:
    """Default 15-sensor layout, or validate an explicit index list.

    Five sensors along the centreline x2 = 0 spanning x1, plus two transverse
    arrays of five at the one-third and two-thirds x1 stations.
    """
    n = grid.n_points
    if indices is not None:
        idx = np.asarray(indices, dtype=np.int64)
        if len(set(idx.tolist())) != len(idx):
            raise ValueError("sensor indices must be distinct")
        if idx.min() < 0 or idx.max() >= n:
            raise ValueError(f"sensor index out of range [0, {n})")
        return idx
    n_x1, n_x2 = len(grid.x1_stations), len(grid.x2_stations)
    x2_vals = np.asarray(grid.x2_stations)
    centre_candidates = np.where(x2_vals == 0.0)[0]
    if len(centre_candidates) == 0:
        raise ValueError("default sensor layout needs an x2 = 0 station")
    i_centre = int(centre_candidates[0])
    # each transverse array takes up to five stations; the centreline run
    # absorbs the rest so the total is always fifteen
    per_array = min(5, n_x2)
    n_centre = 15 - 2 * per_array
    along = np.rint(np.linspace(0, n_x1 - 1, n_centre)).astype(int)
    along_set = set(along.tolist())
    third = int(np.rint((n_x1 - 1) / 3.0))
    two_thirds = int(np.rint(2.0 * (n_x1 - 1) / 3.0))
    while third in along_set and third > 0:
        third -= 1
    while (two_thirds in along_set or two_thirds == third) and two_thirds < n_x1 - 1:
        two_thirds += 1
    across = np.rint(np.linspace(0, n_x2 - 1, per_array)).astype(int)
    sensors = [i1 * n_x2 + i_centre for i1 in along]
    sensors += [third * n_x2 + i2 for i2 in across]
    sensors += [two_thirds * n_x2 + i2 for i2 in across]
    idx = np.asarray(sensors, dtype=np.int64)
    if len(set(idx.tolist())) != len(idx):
        raise ValueError("default sensor layout degenerate for this grid")
    return idx


@dataclass(frozen=True)
class GroundModel:
    ring_length_m: float = 2.0
    face_start_m: float = -12.0
    trough_width_m: float = 10.0   # transverse Gaussian decay scale
    kernel_width_m: float = 6.0    # longitudinal Gaussian decay scale
    base_loss_mm: float = 0.2      # volume-loss increment floor
    grout_gain_mm: float = 0.5     # sensitivity to grout pressure deficit
    support_gain_mm: float = 0.3   # sensitivity to support pressure deficit
    pg_bounds: tuple[float, float] = (120.0, 220.0)
    ps_bounds: tuple[float, float] = (100.0, 200.0)
    gain: float = 1.0              # overall calibration factor K

    def __post_init__(self):
        for name in ("ring_length_m", "trough_width_m", "kernel_width_m", "gain"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


def face_positions(model: GroundModel, t_i: int) -> np.ndarray:
    """Face x1 positions after steps 1..t_i."""
    return model.face_start_m + model.ring_length_m * np.arange(1, t_i + 1)


def volume_increments(model: GroundModel, p_g: np.ndarray, p_s: np.ndarray) -> np.ndarray:
    """Per-step volume-loss increments (mm), clamped at zero."""
    g_lo, g_hi = model.pg_bounds
    s_lo, s_hi = model.ps_bounds
    n_g = (np.asarray(p_g, dtype=np.float64) - g_lo) / (g_hi - g_lo)
    n_s = (np.asarray(p_s, dtype=np.float64) - s_lo) / (s_hi - s_lo)
    dv = (model.base_loss_mm + model.grout_gain_mm * (1.0 - n_g)
          + model.support_gain_mm * (1.0 - n_s))
    return np.maximum(dv, 0.0)


def settlement_field(model: GroundModel, p_g: np.ndarray, p_s: np.ndarray,
                     t_i: int, points: np.ndarray) -> np.ndarray:
    """Settlement (mm, negative) at each point after construction step t_i."""
    p_g = np.asarray(p_g, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    if p_g.shape != p_s.shape or p_g.ndim != 1:
        raise ValueError("pressure series must be equal-length 1-D arrays")
    if not 1 <= t_i <= len(p_g):
        raise ValueError(f"t_i must be in [1, {len(p_g)}], got {t_i}")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dv = volume_increments(model, p_g[:t_i], p_s[:t_i])
    xi = face_positions(model, t_i)
    il2 = 2.0 * model.kernel_width_m ** 2
    it2 = 2.0 * model.trough_width_m ** 2
    longitudinal = np.exp(-((pts[:, 0][:, None] - xi[None, :]) ** 2) / il2)
    transverse = np.exp(-(pts[:, 1] ** 2) / it2)
    return -model.gain * transverse * (longitudinal @ dv)


def settlement(model: GroundModel, p_g: np.ndarray, p_s: np.ndarray,
               t_i: int, x1: float, x2: float) -> float:
    """Settlement (mm, <= 0) at one surface point after step t_i."""
    return float(settlement_field(model, p_g, p_s, t_i,
                                  np.array([[x1, x2]]))[0])


def calibrate_gain(model: GroundModel, spec: ScenarioSpec, grid: SurfaceGrid,
                   target_mm: float = 10.0, rel_tol: float = 1e-9) -> GroundModel:
    """Bisect the gain K so the reference scenario peaks at exactly target_mm."""
    ref = reference_scenario(spec)
    pts = grid.points()

    def peak(gain: float) -> float:
        m = replace(model, gain=gain)
        return float(np.max(np.abs(settlement_field(m, ref.p_g, ref.p_s,
                                                    spec.n_steps, pts))))

    lo, hi = 0.0, 1.0
    while peak(hi) < target_mm:
        hi *= 2.0
        if hi > 1e12:
            raise ValueError("calibration failed to bracket the target")
    while (hi - lo) > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if peak(mid) < target_mm:
            lo = mid
        else:
            hi = mid
    return replace(model, gain=0.5 * (lo + hi))


# -- low-fidelity dataset generation and export -------------------------------

@dataclass
class RawDataset:
    """Flat record table: one row per (scenario, step, grid point)."""

    spec: ScenarioSpec
    model: GroundModel
    grid: SurfaceGrid
    scenarios: list[Scenario]
    scenario_id: np.ndarray   # (n_records,) int64
    t_i: np.ndarray           # (n_records,) int64
    point_index: np.ndarray   # (n_records,) int64 into grid.points()
    settlement_mm: np.ndarray # (n_records,) float64

    @property
    def n_records(self) -> int:
        return len(self.settlement_mm)


def gen_lowfi_dataset(model: GroundModel, spec: ScenarioSpec, n_scenarios: int,
                      grid: SurfaceGrid) -> RawDataset:
    """All (scenario, step, point) settlement records, scenario/step/point-major."""
    if n_scenarios < 1:
        raise ValueError(f"n_scenarios must be >= 1, got {n_scenarios}")
    pts = grid.points()
    n_p = len(pts)
    n_t = spec.n_steps
    scenarios = [gen_scenario(spec, sid) for sid in range(1, n_scenarios + 1)]
    settle = np.empty(n_scenarios * n_t * n_p)
    row = 0
    for sc in scenarios:
        for t in range(1, n_t + 1):
            settle[row:row + n_p] = settlement_field(model, sc.p_g, sc.p_s, t, pts)
            row += n_p
    sid = np.repeat([sc.scenario_id for sc in scenarios], n_t * n_p).astype(np.int64)
    t_i = np.tile(np.repeat(np.arange(1, n_t + 1), n_p), n_scenarios).astype(np.int64)
    p_idx = np.tile(np.arange(n_p), n_scenarios * n_t).astype(np.int64)
    return RawDataset(spec=spec, model=model, grid=grid, scenarios=scenarios,
                      scenario_id=sid, t_i=t_i, point_index=p_idx,
                      settlement_mm=settle)


CSV_HEADER = "scenario_id,t_i,x1_m,x2_m,settlement_mm"


def write_raw_csv(raw: RawDataset, csv_path, sidecar_path) -> None:
    """CSV record table plus a JSON sidecar holding the generating configuration."""
    pts = raw.grid.points()
    with open(csv_path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for sid, t, pi, s in zip(raw.scenario_id, raw.t_i, raw.point_index,
                                 raw.settlement_mm):
            x1, x2 = pts[pi]
            f.write(f"{int(sid)},{int(t)},{float(x1)!r},{float(x2)!r},"
                    f"{float(s)!r}\n")
    sidecar = {
        "schema_version": 1,
        "scenario_spec": asdict(raw.spec),
        "ground_model": asdict(raw.model),
        "grid": {"x1_stations": list(raw.grid.x1_stations),
                 "x2_stations": list(raw.grid.x2_stations)},
        "n_scenarios": len(raw.scenarios),
        "n_records": raw.n_records,
    }
    with open(sidecar_path, "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_raw(csv_path, sidecar_path) -> RawDataset:
    with open(sidecar_path) as f:
        meta = json.load(f)
    spec_d = dict(meta["scenario_spec"])
    spec_d["pg_bounds"] = tuple(spec_d["pg_bounds"])
    spec_d["ps_bounds"] = tuple(spec_d["ps_bounds"])
    spec = ScenarioSpec(**spec_d)
    model_d = dict(meta["ground_model"])
    model_d["pg_bounds"] = tuple(model_d["pg_bounds"])
    model_d["ps_bounds"] = tuple(model_d["ps_bounds"])
    model = GroundModel(**model_d)
    grid = SurfaceGrid(tuple(meta["grid"]["x1_stations"]),
                       tuple(meta["grid"]["x2_stations"]))
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1)
    if data.ndim == 1:
        data = data[None, :]
    if data.shape[0] != meta["n_records"]:
        raise ValueError(f"CSV row count {data.shape[0]} != sidecar n_records "
                         f"{meta['n_records']}")
    pts = grid.points()
    x1 = data[:, 2]
    x2 = data[:, 3]
    # map coordinates back to grid indices
    i1 = np.argmin(np.abs(np.asarray(grid.x1_stations)[None, :] - x1[:, None]), axis=1)
    i2 = np.argmin(np.abs(np.asarray(grid.x2_stations)[None, :] - x2[:, None]), axis=1)
    p_idx = (i1 * len(grid.x2_stations) + i2).astype(np.int64)
    scenarios = [gen_scenario(spec, sid)
                 for sid in range(1, meta["n_scenarios"] + 1)]
    return RawDataset(spec=spec, model=model, grid=grid, scenarios=scenarios,
                      scenario_id=data[:, 0].astype(np.int64),
                      t_i=data[:, 1].astype(np.int64),
                      point_index=p_idx,
                      settlement_mm=data[:, 4])
