"""Two-stage multi-fidelity training and prediction.

Stage one fits the low-fidelity operator net to simulator records offline.
Stage two, repeated whenever new measurements arrive, freezes the trained
low-fidelity net, evaluates it at the measurement sites, and fits a fresh
residual net whose trunk input is the query point augmented with the
low-fidelity prediction (in normalized units). The composite prediction is
the literal sum of the two denormalized outputs, so subtracting the
low-fidelity part recovers the residual contribution bit for bit.
"""
from __future__ import annotations

import io
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .causal import HifiData, LowfiData, NormStats, TripletDataset, causal_embed
from .errors import CorruptCheckpointError, NumericError, TrainingFailure
from .numkit import AdamState, LrSchedule, RngStream, adam_init, adam_step, lr_at
from .opnet import (Checkpoint, NetConfig, NetParams, forward_batch, init_params,
                    loss_and_grads, zero_params)

COMPOSITE_MAGIC = b"SFCMPS1"
COMPOSITE_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    batch_size: int | None = None     # None trains on the full batch
    lr: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    val_every: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainHistory:
    iterations: list[int]
    train_loss: list[float]
    val_r2: list[float | None]
    wall_seconds: float = 0.0


def _val_r2(params: NetParams, data: TripletDataset) -> float | None:
    if data.n_records == 0:
        return None
    branch, trunk, targets = data.full()
    preds = forward_batch(params, branch, trunk)
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        return None
    ss_res = float(np.sum((preds - targets) ** 2))
    return 1.0 - ss_res / ss_tot


def _run_adam(params: NetParams, batches, config: TrainConfig,
              val_data: TripletDataset | None) -> tuple[NetParams, TrainHistory]:
    """Shared optimizer loop; ``batches`` yields (branch, trunk, targets)."""
    flat = params.flat()
    state = adam_init(flat)
    depth = len(params.branch_layers)
    history = TrainHistory(iterations=[], train_loss=[], val_r2=[])
    t0 = time.perf_counter()
    for it in range(config.iterations):
        branch, trunk, targets = next(batches)
        try:
            loss, grads = loss_and_grads(params, branch, trunk, targets)
        except NumericError as exc:
            raise TrainingFailure(f"non-finite loss at iteration {it}: {exc}",
                                  iteration=it) from exc
        try:
            flat, state = adam_step(flat, grads.flat(), state, lr_at(config.lr, it))
        except NumericError as exc:
            raise TrainingFailure(f"non-finite gradient at iteration {it}: {exc}",
                                  iteration=it) from exc
        params = NetParams.from_flat(flat, depth)
        if (it + 1) % config.val_every == 0 or it == config.iterations - 1:
            history.iterations.append(it + 1)
            history.train_loss.append(loss)
            history.val_r2.append(_val_r2(params, val_data)
                                  if val_data is not None else None)
    history.wall_seconds = time.perf_counter() - t0
    return params, history


def _minibatch_stream(data: TripletDataset, batch_size: int | None, rng: RngStream):
    """Epoch-shuffled minibatches without replacement; full batch if size is None."""
    n = data.n_records
    if batch_size is None or batch_size >= n:
        rows = np.arange(n)
        batch = data.gather(rows)
        while True:
            yield batch
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield data.gather(order[start:start + batch_size])


def train_lowfi(data: LowfiData, net_config: NetConfig,
                config: TrainConfig) -> tuple[Checkpoint, TrainHistory]:
    """Offline stage: fit the low-fidelity net to simulator triplets."""
    if data.train.n_records == 0:
        raise ValueError("empty training split")
    expect = 2 * data.train.n_t
    if net_config.branch_input_dim != expect:
        raise ValueError(f"branch_input_dim {net_config.branch_input_dim} != 2*n_t = {expect}")
    rng = RngStream(config.seed)
    params = init_params(net_config, rng.split("lowfi-init"))
    batches = _minibatch_stream(data.train, config.batch_size, rng.split("batches"))
    params, history = _run_adam(params, batches, config, data.val)
    return Checkpoint(config=net_config, params=params, norm=data.stats), history


def residual_net_config(lf: Checkpoint, width: int, depth: int) -> NetConfig:
    """Residual net signature: same branch input, trunk gains the lf output."""
    return NetConfig(branch_input_dim=lf.config.branch_input_dim,
                     trunk_input_dim=lf.config.trunk_input_dim + 1,
                     width=width, depth=depth)


def _augment_trunk(g_norm: np.ndarray, trunk: np.ndarray) -> np.ndarray:
    """Residual trunk input: low-fidelity output first, then the query point."""
    return np.column_stack([g_norm, trunk])


@dataclass
class CompositeModel:
    lf: Checkpoint
    residual: Checkpoint

    @property
    def norm(self) -> NormStats:
        return self.lf.norm

    def __post_init__(self):
        if self.lf.norm != self.residual.norm:
            raise ValueError("lf and residual checkpoints disagree on normalization")
        if self.residual.config.trunk_input_dim != self.lf.config.trunk_input_dim + 1:
            raise ValueError("residual trunk must have exactly one extra input")
        if self.residual.config.branch_input_dim != self.lf.config.branch_input_dim:
            raise ValueError("residual and lf branch input dims differ")


def zero_residual_model(lf: Checkpoint, width: int, depth: int) -> CompositeModel:
    """Composite whose residual net outputs exactly zero everywhere."""
    cfg = residual_net_config(lf, width, depth)
    res = Checkpoint(config=cfg, params=zero_params(cfg), norm=lf.norm)
    return CompositeModel(lf=lf, residual=res)


def train_residual(hf: HifiData, lf: Checkpoint, config: TrainConfig,
                   width: int, depth: int) -> tuple[CompositeModel, TrainHistory]:
    """Online stage: fresh residual net fit to measurement triplets.

    The low-fidelity net is left untouched; its predictions enter only as
    data (the extra trunk entry) and as the baseline the residual corrects.
    """
    if hf.n_records == 0:
        raise ValueError("empty measurement set")
    g_norm = forward_batch(lf.params, hf.branch, hf.trunk)
    trunk_aug = _augment_trunk(g_norm, hf.trunk)
    residual_targets = hf.targets - g_norm

    cfg = residual_net_config(lf, width, depth)
    rng = RngStream(config.seed)
    params = init_params(cfg, rng.split("residual-init"))

    def batches():
        if config.batch_size is None or config.batch_size >= hf.n_records:
            while True:
                yield hf.branch, trunk_aug, residual_targets
        else:
            b_rng = rng.split("batches")
            n = hf.n_records
            while True:
                order = b_rng.permutation(n)
                for s in range(0, n, config.batch_size):
                    rows = order[s:s + config.batch_size]
                    yield hf.branch[rows], trunk_aug[rows], residual_targets[rows]

    params, history = _run_adam(params, batches(), config, None)
    res = Checkpoint(config=cfg, params=params, norm=lf.norm)
    return CompositeModel(lf=lf, residual=res), history


def composite_loss(model: CompositeModel, hf: HifiData) -> float:
    """Mean squared error of the composite against measurements, normalized units."""
    g = forward_batch(model.lf.params, hf.branch, hf.trunk)
    r = forward_batch(model.residual.params, hf.branch, _augment_trunk(g, hf.trunk))
    diff = g + r - hf.targets
    return float(np.mean(diff * diff))


# -- prediction ---------------------------------------------------------------

def lf_predict_batch(lf: Checkpoint, p_g: np.ndarray, p_s: np.ndarray, t_i: int,
                     points: np.ndarray) -> np.ndarray:
    """Low-fidelity settlement (mm) at the given points after step t_i."""
    stats = lf.norm
    n_t = lf.config.branch_input_dim // 2
    row = causal_embed(stats.norm_pg(p_g), stats.norm_ps(p_s), t_i, n_t)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    branch = np.broadcast_to(row, (len(pts), len(row))).copy()
    out = forward_batch(lf.params, branch, stats.norm_points(pts))
    return stats.denorm_settle(out)


def lf_predict(lf: Checkpoint, p_g: np.ndarray, p_s: np.ndarray, t_i: int,
               point) -> float:
    return float(lf_predict_batch(lf, p_g, p_s, t_i, np.atleast_2d(point))[0])


@dataclass
class FieldPrediction:
    lf_mm: np.ndarray
    residual_mm: np.ndarray
    total_mm: np.ndarray  # always the literal sum lf_mm + residual_mm


def predict_composite_batch(model: CompositeModel, p_g: np.ndarray, p_s: np.ndarray,
                            t_i: int, points: np.ndarray) -> FieldPrediction:
    stats = model.norm
    n_t = model.lf.config.branch_input_dim // 2
    row = causal_embed(stats.norm_pg(p_g), stats.norm_ps(p_s), t_i, n_t)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    branch = np.broadcast_to(row, (len(pts), len(row))).copy()
    trunk = stats.norm_points(pts)
    g = forward_batch(model.lf.params, branch, trunk)
    r = forward_batch(model.residual.params, branch, _augment_trunk(g, trunk))
    lf_mm = stats.denorm_settle(g)
    res_mm = stats.denorm_settle(r)
    return FieldPrediction(lf_mm=lf_mm, residual_mm=res_mm,
                           total_mm=lf_mm + res_mm)


def predict_composite(model: CompositeModel, p_g: np.ndarray, p_s: np.ndarray,
                      t_i: int, point) -> tuple[float, float, float]:
    """(lf_mm, residual_mm, total_mm) at one point; total is the literal sum."""
    f = predict_composite_batch(model, p_g, p_s, t_i, np.atleast_2d(point))
    return float(f.lf_mm[0]), float(f.residual_mm[0]), float(f.total_mm[0])


def predict_field(model: CompositeModel, p_g: np.ndarray, p_s: np.ndarray,
                  t_i: int, grid) -> FieldPrediction:
    """Composite settlement over every grid point after step t_i."""
    return predict_composite_batch(model, p_g, p_s, t_i, grid.points())


# -- composite container serialization ---------------------------------------

def composite_bytes(model: CompositeModel) -> bytes:
    from .opnet import checkpoint_bytes
    lf_blob = checkpoint_bytes(model.lf)
    res_blob = checkpoint_bytes(model.residual)
    buf = io.BytesIO()
    buf.write(COMPOSITE_MAGIC)
    buf.write(struct.pack("<I", COMPOSITE_VERSION))
    buf.write(struct.pack("<Q", len(lf_blob)))
    buf.write(lf_blob)
    buf.write(struct.pack("<Q", len(res_blob)))
    buf.write(res_blob)
    return buf.getvalue()


def save_composite(model: CompositeModel, path) -> None:
    with open(path, "wb") as f:
        f.write(composite_bytes(model))


def composite_from_bytes(data: bytes) -> CompositeModel:
    from .opnet import checkpoint_from_bytes
    buf = io.BytesIO(data)
    if buf.read(len(COMPOSITE_MAGIC)) != COMPOSITE_MAGIC:
        raise CorruptCheckpointError("bad composite magic")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != COMPOSITE_VERSION:
        raise CorruptCheckpointError(f"unsupported composite version {version}")
    sections = []
    for _ in range(2):
        raw = buf.read(8)
        if len(raw) != 8:
            raise CorruptCheckpointError("truncated composite container")
        (n,) = struct.unpack("<Q", raw)
        blob = buf.read(n)
        if len(blob) != n:
            raise CorruptCheckpointError("truncated composite section")
        sections.append(checkpoint_from_bytes(blob))
    if buf.read(1):
        raise CorruptCheckpointError("trailing bytes in composite container")
    return CompositeModel(lf=sections[0], residual=sections[1])


def load_composite(path) -> CompositeModel:
    with open(path, "rb") as f:
        return composite_from_bytes(f.read())
