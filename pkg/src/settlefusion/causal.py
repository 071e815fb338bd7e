"""Causality-preserving dataset assembly and normalization.

The loading-history input for step t packs the two pressure series in
reverse chronological order with zero padding for steps that have not
happened yet:

    [Pg(t), ..., Pg(1), 0 ... 0, Ps(t), ..., Ps(1), 0 ... 0]

so a prediction at step t can never see later operations. Pressures and
coordinates are min-max normalized to [0, 1] against the configured
generation bands (not per-dataset extrema); settlement targets are divided
by the maximum absolute settlement of the training split.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptCheckpointError, DegenerateRangeError
from .ground import RawDataset, Scenario, SurfaceGrid
from .numkit import RngStream

DATASET_MAGIC = b"SFDSET1"
DATASET_VERSION = 1


@dataclass(frozen=True)
class NormStats:
    pg_min: float
    pg_max: float
    ps_min: float
    ps_max: float
    x1_min: float
    x1_max: float
    x2_min: float
    x2_max: float
    settle_scale: float  # max |settlement| over the training split, mm

    def __post_init__(self):
        for name in ("pg", "ps", "x1", "x2"):
            lo = getattr(self, f"{name}_min")
            hi = getattr(self, f"{name}_max")
            if not hi > lo:
                raise DegenerateRangeError(f"{name} range degenerate: [{lo}, {hi}]")
        if not self.settle_scale > 0:
            raise DegenerateRangeError(f"settle_scale must be > 0, got {self.settle_scale}")

    def as_tuple(self) -> tuple:
        return (self.pg_min, self.pg_max, self.ps_min, self.ps_max,
                self.x1_min, self.x1_max, self.x2_min, self.x2_max,
                self.settle_scale)

    @staticmethod
    def from_tuple(t) -> "NormStats":
        return NormStats(*t)

    def norm_pg(self, p):
        return (np.asarray(p, dtype=np.float64) - self.pg_min) / (self.pg_max - self.pg_min)

    def norm_ps(self, p):
        return (np.asarray(p, dtype=np.float64) - self.ps_min) / (self.ps_max - self.ps_min)

    def norm_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty_like(pts)
        out[:, 0] = (pts[:, 0] - self.x1_min) / (self.x1_max - self.x1_min)
        out[:, 1] = (pts[:, 1] - self.x2_min) / (self.x2_max - self.x2_min)
        return out

    def norm_settle(self, s):
        return np.asarray(s, dtype=np.float64) / self.settle_scale

    def denorm_settle(self, s):
        return np.asarray(s, dtype=np.float64) * self.settle_scale


def causal_embed(p_g: np.ndarray, p_s: np.ndarray, t_i: int, n_t: int) -> np.ndarray:
    """Pack histories up to step t_i into the fixed-width branch layout."""
    p_g = np.asarray(p_g, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    if not 1 <= t_i <= n_t:
        raise ValueError(f"t_i must be in [1, {n_t}], got {t_i}")
    if len(p_g) < t_i or len(p_s) < t_i:
        raise ValueError(f"pressure series shorter than t_i = {t_i}")
    out = np.zeros(2 * n_t)
    out[:t_i] = p_g[t_i - 1::-1]
    out[n_t:n_t + t_i] = p_s[t_i - 1::-1]
    return out


def embed_table(p_g: np.ndarray, p_s: np.ndarray, n_t: int) -> np.ndarray:
    """Branch rows for every step 1..n_t of one scenario, stacked."""
    return np.stack([causal_embed(p_g, p_s, t, n_t) for t in range(1, n_t + 1)])


def split_scenario_ids(ids: list[int]) -> tuple[list[int], list[int], list[int]]:
    """Deterministic split by id order: first 80% train, next 10% val, rest test."""
    ids = sorted(ids)
    n = len(ids)
    n_train = int(n * 0.8)
    n_val = int(n * 0.1)
    return ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:]


def fit_norm(raw: RawDataset) -> NormStats:
    """Normalization constants: configured bands for inputs, train split for scale."""
    train_ids, _, _ = split_scenario_ids([sc.scenario_id for sc in raw.scenarios])
    mask = np.isin(raw.scenario_id, train_ids)
    if not mask.any():
        raise ValueError("empty training split")
    scale = float(np.max(np.abs(raw.settlement_mm[mask])))
    if scale == 0.0:
        raise DegenerateRangeError("training settlements are identically zero")
    return NormStats(
        pg_min=raw.spec.pg_bounds[0], pg_max=raw.spec.pg_bounds[1],
        ps_min=raw.spec.ps_bounds[0], ps_max=raw.spec.ps_bounds[1],
        x1_min=min(raw.grid.x1_stations), x1_max=max(raw.grid.x1_stations),
        x2_min=min(raw.grid.x2_stations), x2_max=max(raw.grid.x2_stations),
        settle_scale=scale,
    )


@dataclass
class TripletDataset:
    """(branch, trunk, target) records stored via shared lookup tables.

    Branch rows depend only on (scenario, step) and trunk rows only on the
    grid point, so records hold indices into the two tables instead of
    materialized vectors.
    """

    branch_table: np.ndarray   # (n_branch_rows, 2 n_t) normalized embeddings
    trunk_table: np.ndarray    # (n_trunk_rows, 2) normalized coordinates
    branch_idx: np.ndarray     # (n_records,) int64
    trunk_idx: np.ndarray      # (n_records,) int64
    targets: np.ndarray        # (n_records,) normalized settlement
    scenario_ids: np.ndarray   # (n_records,) int64
    n_t: int

    @property
    def n_records(self) -> int:
        return len(self.targets)

    def gather(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.branch_table[self.branch_idx[rows]],
                self.trunk_table[self.trunk_idx[rows]],
                self.targets[rows])

    def full(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.gather(np.arange(self.n_records))


@dataclass
class LowfiData:
    train: TripletDataset
    val: TripletDataset
    test: TripletDataset
    stats: NormStats
    split_ids: tuple[list[int], list[int], list[int]]


def assemble_lowfi(raw: RawDataset, stats: NormStats) -> LowfiData:
    """Normalize raw records into triplets and split by scenario id order."""
    n_t = raw.spec.n_steps
    n_p = raw.grid.n_points
    ids = [sc.scenario_id for sc in raw.scenarios]
    counts = {sid: int(np.sum(raw.scenario_id == sid)) for sid in ids}
    for sid, cnt in counts.items():
        if cnt != n_t * n_p:
            raise ValueError(f"scenario {sid} has {cnt} records, expected {n_t * n_p}")

    branch_rows = []
    row_of = {}
    for sc in raw.scenarios:
        row_of[sc.scenario_id] = n_t * len(branch_rows)
        branch_rows.append(embed_table(stats.norm_pg(sc.p_g), stats.norm_ps(sc.p_s), n_t))
    branch_table = np.concatenate(branch_rows, axis=0)
    trunk_table = stats.norm_points(raw.grid.points())

    branch_idx = (np.asarray([row_of[s] for s in raw.scenario_id], dtype=np.int64)
                  + (raw.t_i - 1))
    trunk_idx = raw.point_index.astype(np.int64)
    targets = stats.norm_settle(raw.settlement_mm)

    train_ids, val_ids, test_ids = split_scenario_ids(ids)

    def subset(keep: list[int]) -> TripletDataset:
        mask = np.isin(raw.scenario_id, keep)
        return TripletDataset(branch_table=branch_table, trunk_table=trunk_table,
                              branch_idx=branch_idx[mask], trunk_idx=trunk_idx[mask],
                              targets=targets[mask],
                              scenario_ids=raw.scenario_id[mask].astype(np.int64),
                              n_t=n_t)

    return LowfiData(train=subset(train_ids), val=subset(val_ids),
                     test=subset(test_ids), stats=stats,
                     split_ids=(train_ids, val_ids, test_ids))


# -- high-fidelity synthesis --------------------------------------------------

@dataclass(frozen=True)
class HfSpec:
    """Measurement synthesis: scale mismatch k plus white noise of sigma mm."""

    k: float
    sigma_mm: float
    seed: int

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError(f"k must be > 0, got {self.k}")
        if self.sigma_mm < 0:
            raise ValueError(f"sigma_mm must be >= 0, got {self.sigma_mm}")


def synthesize_hifi(s_l_mm: np.ndarray, spec: HfSpec) -> np.ndarray:
    """s_H = k * s_L + N(0, sigma^2), elementwise, deterministic in spec.seed."""
    s_l = np.asarray(s_l_mm, dtype=np.float64)
    noise = RngStream(spec.seed).split("hifi-noise").normal(shape=s_l.shape,
                                                           std=1.0)
    return spec.k * s_l + spec.sigma_mm * noise


def calibrate_noise(target_level: float, k: float, s_l_mm: np.ndarray) -> float:
    """Noise sigma so the expected relative L2 discrepancy equals target_level.

    E ||sH - sL||^2 / ||sL||^2 = (1-k)^2 + N sigma^2 / ||sL||^2, so the scale
    mismatch alone contributes |1-k|; targets below that are unreachable.
    """
    if target_level < 0:
        raise ValueError(f"target_level must be >= 0, got {target_level}")
    floor = abs(1.0 - k)
    if target_level < floor:
        raise ValueError(f"target level {target_level} below minimum achievable "
                         f"{floor} for k = {k}")
    s_l = np.asarray(s_l_mm, dtype=np.float64)
    msq = float(np.mean(s_l * s_l))
    if msq == 0.0:
        raise ValueError("reference settlements are identically zero")
    return float(np.sqrt((target_level ** 2 - floor ** 2) * msq))


def l2_error(a: np.ndarray, b: np.ndarray) -> float:
    """Relative L2 discrepancy ||a - b|| / ||b||."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} != {b.shape}")
    denom = float(np.linalg.norm(b))
    if denom == 0.0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(a - b) / denom)


@dataclass
class HifiData:
    """Measured (or synthesized) sensor records for steps 1..t_n, normalized."""

    branch: np.ndarray        # (t_n * n_sensors, 2 n_t)
    trunk: np.ndarray         # (t_n * n_sensors, 2)
    targets: np.ndarray       # (t_n * n_sensors,) normalized
    t_n: int
    n_sensors: int
    readings_mm: np.ndarray   # (t_n, n_sensors) raw measurements

    @property
    def n_records(self) -> int:
        return len(self.targets)


def assemble_hifi(p_g: np.ndarray, p_s: np.ndarray, readings_mm: np.ndarray,
                  sensor_points: np.ndarray, stats: NormStats, n_t: int) -> HifiData:
    """Triplets for sensor readings at steps 1..t_n, step-major, sensor-minor."""
    readings = np.atleast_2d(np.asarray(readings_mm, dtype=np.float64))
    t_n, n_sensors = readings.shape
    if not 1 <= t_n <= n_t:
        raise ValueError(f"t_n must be in [1, {n_t}], got {t_n}")
    pts = np.atleast_2d(np.asarray(sensor_points, dtype=np.float64))
    if len(pts) != n_sensors:
        raise ValueError(f"{n_sensors} reading columns but {len(pts)} sensor points")
    bad = np.argwhere(~np.isfinite(readings))
    if len(bad):
        gaps = ", ".join(f"(step {i + 1}, sensor {j})" for i, j in bad[:8])
        raise ValueError(f"missing sensor readings at: {gaps}")
    pg_n = stats.norm_pg(p_g)
    ps_n = stats.norm_ps(p_s)
    branch_steps = np.stack([causal_embed(pg_n, ps_n, t, n_t)
                             for t in range(1, t_n + 1)])
    trunk_rows = stats.norm_points(pts)
    branch = np.repeat(branch_steps, n_sensors, axis=0)
    trunk = np.tile(trunk_rows, (t_n, 1))
    targets = stats.norm_settle(readings.reshape(-1))
    return HifiData(branch=branch, trunk=trunk, targets=targets, t_n=t_n,
                    n_sensors=n_sensors, readings_mm=readings)


# -- binary dataset cache -----------------------------------------------------

def _write_array(buf, arr: np.ndarray, dtype: str) -> None:
    a = np.ascontiguousarray(arr)
    buf.write(struct.pack("<Q", a.size))
    buf.write(a.astype(dtype).tobytes())


def _read_array(buf, dtype: str, itemsize: int) -> np.ndarray:
    raw = buf.read(8)
    if len(raw) != 8:
        raise CorruptCheckpointError("truncated dataset cache")
    (n,) = struct.unpack("<Q", raw)
    data = buf.read(n * itemsize)
    if len(data) != n * itemsize:
        raise CorruptCheckpointError("truncated dataset cache")
    return np.frombuffer(data, dtype=dtype).copy()


def save_lowfi_cache(data: LowfiData, path) -> None:
    """Little-endian binary cache of the assembled, split triplet dataset."""
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<II", DATASET_VERSION, data.train.n_t))
    buf.write(struct.pack("<9d", *data.stats.as_tuple()))
    bt = data.train.branch_table
    tt = data.train.trunk_table
    buf.write(struct.pack("<QQQQ", bt.shape[0], bt.shape[1], tt.shape[0], tt.shape[1]))
    buf.write(np.ascontiguousarray(bt).astype("<f8").tobytes())
    buf.write(np.ascontiguousarray(tt).astype("<f8").tobytes())
    for ids in data.split_ids:
        _write_array(buf, np.asarray(ids, dtype=np.int64), "<i8")
    for split in (data.train, data.val, data.test):
        _write_array(buf, split.branch_idx, "<i8")
        _write_array(buf, split.trunk_idx, "<i8")
        _write_array(buf, split.targets, "<f8")
        _write_array(buf, split.scenario_ids, "<i8")
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_lowfi_cache(path) -> LowfiData:
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    magic = buf.read(len(DATASET_MAGIC))
    if magic != DATASET_MAGIC:
        raise CorruptCheckpointError(f"bad dataset magic {magic!r}")
    version, n_t = struct.unpack("<II", buf.read(8))
    if version != DATASET_VERSION:
        raise CorruptCheckpointError(f"unsupported dataset version {version}")
    stats = NormStats.from_tuple(struct.unpack("<9d", buf.read(72)))
    b_rows, b_cols, t_rows, t_cols = struct.unpack("<QQQQ", buf.read(32))
    branch_table = np.frombuffer(buf.read(8 * b_rows * b_cols),
                                 dtype="<f8").reshape(b_rows, b_cols).copy()
    trunk_table = np.frombuffer(buf.read(8 * t_rows * t_cols),
                                dtype="<f8").reshape(t_rows, t_cols).copy()
    split_ids = tuple(_read_array(buf, "<i8", 8).tolist() for _ in range(3))
    splits = []
    for _ in range(3):
        b_idx = _read_array(buf, "<i8", 8)
        t_idx = _read_array(buf, "<i8", 8)
        targets = _read_array(buf, "<f8", 8)
        sids = _read_array(buf, "<i8", 8)
        splits.append(TripletDataset(branch_table=branch_table,
                                     trunk_table=trunk_table,
                                     branch_idx=b_idx, trunk_idx=t_idx,
                                     targets=targets, scenario_ids=sids,
                                     n_t=n_t))
    if buf.read(1):
        raise CorruptCheckpointError("trailing bytes in dataset cache")
    return LowfiData(train=splits[0], val=splits[1], test=splits[2],
                     stats=stats, split_ids=split_ids)
