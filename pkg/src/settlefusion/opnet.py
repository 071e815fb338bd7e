"""Two-encoder gated operator network with hand-derived backpropagation.

The network evaluates a scalar field G(u)(y) from a loading-history vector u
(branch input) and a query point y (trunk input). Both inputs are first
passed through dedicated encoders

    U = tanh(Wu u + bu),   V = tanh(Wy y + by)

and each tower then alternates plain layers with gated mixing against the
shared pair (U, V):

    H1     = tanh(W1 x + b1)
    Zl     = tanh(W(l+1) Hl + b(l+1))          l = 1 .. L-1
    H(l+1) = (1 - Zl) * U + Zl * V
    Hout   = tanh(WL Hlast + bL)

and the output is the inner product of the two tower states, with no output
bias. Both towers mix against the same U and V, so the branch tower depends
on the query point; evaluation is inherently per (u, y) pair. The final
transform reuses the L-th layer pair (which also drives the last gate); this
is the only shape-consistent completion of the recurrence, and for L = 1 it
degenerates to applying the single layer twice, which requires the input
dimension to equal the width.

The backward pass is derived by hand: gradients accumulate into reused
weights from every application, and the encoder gradients collect mixing
contributions from both towers across all gate levels.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from .causal import NormStats
from .errors import CorruptCheckpointError, NumericError
from .numkit import RngStream, glorot_normal, matmul, tanh_act, tanh_grad

CHECKPOINT_MAGIC = b"SFCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    branch_input_dim: int
    trunk_input_dim: int
    width: int
    depth: int

    def __post_init__(self):
        if min(self.branch_input_dim, self.trunk_input_dim, self.width, self.depth) < 1:
            raise ValueError(f"all NetConfig fields must be >= 1: {self}")
        if self.depth == 1 and (self.branch_input_dim != self.width
                                or self.trunk_input_dim != self.width):
            # single-layer nets reuse layer 1 as the final transform, which
            # is only shape-valid when inputs already have the hidden width
            raise ValueError("depth-1 nets require input dims equal to width")


@dataclass
class Linear:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)


@dataclass
class NetParams:
    branch_encoder: Linear
    trunk_encoder: Linear
    branch_layers: list[Linear]
    trunk_layers: list[Linear]

    def flat(self) -> list[np.ndarray]:
        """All arrays in declaration order (encoders first, then layer lists)."""
        out = [self.branch_encoder.weight, self.branch_encoder.bias,
               self.trunk_encoder.weight, self.trunk_encoder.bias]
        for lin in self.branch_layers:
            out += [lin.weight, lin.bias]
        for lin in self.trunk_layers:
            out += [lin.weight, lin.bias]
        return out

    def flat_names(self) -> list[str]:
        names = ["branch_encoder.weight", "branch_encoder.bias",
                 "trunk_encoder.weight", "trunk_encoder.bias"]
        for i in range(len(self.branch_layers)):
            names += [f"branch_layers[{i}].weight", f"branch_layers[{i}].bias"]
        for i in range(len(self.trunk_layers)):
            names += [f"trunk_layers[{i}].weight", f"trunk_layers[{i}].bias"]
        return names

    @staticmethod
    def from_flat(arrays: list[np.ndarray], depth: int) -> "NetParams":
        if len(arrays) != 4 + 4 * depth:
            raise ValueError(f"expected {4 + 4 * depth} arrays, got {len(arrays)}")
        it = iter(arrays)
        be = Linear(next(it), next(it))
        te = Linear(next(it), next(it))
        bl = [Linear(next(it), next(it)) for _ in range(depth)]
        tl = [Linear(next(it), next(it)) for _ in range(depth)]
        return NetParams(be, te, bl, tl)

    def copy(self) -> "NetParams":
        return NetParams.from_flat([a.copy() for a in self.flat()],
                                   len(self.branch_layers))


def init_params(config: NetConfig, rng: RngStream) -> NetParams:
    """Glorot-normal weights, zero biases. Consumes named substreams of rng."""
    w = config.width

    def lin(fan_in: int, fan_out: int, tag: str) -> Linear:
        return Linear(glorot_normal(fan_in, fan_out, rng.split(tag)),
                      np.zeros(fan_out))

    branch_layers = [lin(config.branch_input_dim, w, "branch_layer_0")]
    trunk_layers = [lin(config.trunk_input_dim, w, "trunk_layer_0")]
    for l in range(1, config.depth):
        branch_layers.append(lin(w, w, f"branch_layer_{l}"))
        trunk_layers.append(lin(w, w, f"trunk_layer_{l}"))
    return NetParams(
        branch_encoder=lin(config.branch_input_dim, w, "branch_encoder"),
        trunk_encoder=lin(config.trunk_input_dim, w, "trunk_encoder"),
        branch_layers=branch_layers,
        trunk_layers=trunk_layers,
    )


def zero_params(config: NetConfig) -> NetParams:
    """All-zero parameters; the net then outputs exactly 0 everywhere."""
    rng = RngStream(0)
    p = init_params(config, rng)
    return NetParams.from_flat([np.zeros_like(a) for a in p.flat()], config.depth)


def mix_states(z: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gated convex mix (1 - z) * u + z * v used by both towers."""
    return (1.0 - z) * u + z * v


def _pre_act(x: np.ndarray, layer: Linear) -> np.ndarray:
    """Affine transform with a cheap non-finite guard.

    tanh would silently saturate an infinite pre-activation to +-1, so the
    guard runs before activation. Checking the sum costs one reduction: any
    nan or inf entry makes the sum non-finite.
    """
    a = matmul(x, layer.weight) + layer.bias
    if not np.isfinite(np.sum(a)):
        raise NumericError("non-finite pre-activation")
    return a


def _tower_forward(layers: list[Linear], x: np.ndarray, u_enc: np.ndarray,
                   v_enc: np.ndarray) -> dict:
    depth = len(layers)
    h = tanh_act(_pre_act(x, layers[0]))
    hs = [h]
    zs = []
    for l in range(1, depth):
        z = tanh_act(_pre_act(h, layers[l]))
        h = mix_states(z, u_enc, v_enc)
        zs.append(z)
        hs.append(h)
    h_out = tanh_act(_pre_act(h, layers[depth - 1]))
    return {"x": x, "hs": hs, "zs": zs, "h_out": h_out}


def _forward_full(params: NetParams, branch_in: np.ndarray,
                  trunk_in: np.ndarray) -> tuple[np.ndarray, dict]:
    if branch_in.ndim != 2 or trunk_in.ndim != 2:
        raise ValueError("batch inputs must be 2-D")
    if branch_in.shape[0] != trunk_in.shape[0]:
        raise ValueError(f"batch size mismatch {branch_in.shape[0]} != {trunk_in.shape[0]}")
    if branch_in.shape[1] != params.branch_encoder.weight.shape[0]:
        raise ValueError(f"branch input dim {branch_in.shape[1]} != "
                         f"{params.branch_encoder.weight.shape[0]}")
    if trunk_in.shape[1] != params.trunk_encoder.weight.shape[0]:
        raise ValueError(f"trunk input dim {trunk_in.shape[1]} != "
                         f"{params.trunk_encoder.weight.shape[0]}")
    u_enc = tanh_act(_pre_act(branch_in, params.branch_encoder))
    v_enc = tanh_act(_pre_act(trunk_in, params.trunk_encoder))
    b_cache = _tower_forward(params.branch_layers, branch_in, u_enc, v_enc)
    t_cache = _tower_forward(params.trunk_layers, trunk_in, u_enc, v_enc)
    out = np.sum(b_cache["h_out"] * t_cache["h_out"], axis=1)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite network output")
    cache = {"u_enc": u_enc, "v_enc": v_enc, "branch": b_cache, "trunk": t_cache,
             "branch_in": branch_in, "trunk_in": trunk_in}
    return out, cache


def forward_batch(params: NetParams, branch_in: np.ndarray,
                  trunk_in: np.ndarray) -> np.ndarray:
    """Evaluate the network on a batch of (u, y) rows. Returns shape (B,)."""
    out, _ = _forward_full(params, branch_in, trunk_in)
    return out


def forward(params: NetParams, u: np.ndarray, y: np.ndarray) -> float:
    """Single-pair evaluation; identical bits to the same row in any batch."""
    out = forward_batch(params, np.atleast_2d(np.asarray(u, dtype=np.float64)),
                        np.atleast_2d(np.asarray(y, dtype=np.float64)))
    return float(out[0])


def _tower_backward(layers: list[Linear], cache: dict, d_h_out: np.ndarray,
                    u_enc: np.ndarray, v_enc: np.ndarray,
                    grads: list[Linear], d_u: np.ndarray, d_v: np.ndarray) -> None:
    """Accumulate layer gradients and encoder-state gradients for one tower.

    Gradient products use plain ``@``: they reduce over the whole batch, so
    the per-row decomposition contract of ``matmul`` does not apply, and for
    fixed shapes the plain product is deterministic in single-threaded mode.
    """
    depth = len(layers)
    hs, zs, h_out = cache["hs"], cache["zs"], cache["h_out"]
    # final transform (layer L, reused)
    d_a = d_h_out * tanh_grad(h_out)
    grads[depth - 1].weight += hs[-1].T @ d_a
    grads[depth - 1].bias += d_a.sum(axis=0)
    d_h = d_a @ layers[depth - 1].weight.T
    # mixing chain, gate at level l uses layer l+1 (0-based index l)
    for l in range(depth - 1, 0, -1):
        z = zs[l - 1]
        d_z = d_h * (v_enc - u_enc)
        d_u += d_h * (1.0 - z)
        d_v += d_h * z
        d_az = d_z * tanh_grad(z)
        grads[l].weight += hs[l - 1].T @ d_az
        grads[l].bias += d_az.sum(axis=0)
        d_h = d_az @ layers[l].weight.T
    # first hidden state
    d_a1 = d_h * tanh_grad(hs[0])
    grads[0].weight += cache["x"].T @ d_a1
    grads[0].bias += d_a1.sum(axis=0)


def loss_and_grads(params: NetParams, branch_in: np.ndarray, trunk_in: np.ndarray,
                   targets: np.ndarray) -> tuple[float, NetParams]:
    """Mean-squared-error loss over the batch and gradients for every array."""
    targets = np.asarray(targets, dtype=np.float64)
    if branch_in.shape[0] == 0:
        raise ValueError("empty batch")
    if targets.shape != (branch_in.shape[0],):
        raise ValueError(f"targets shape {targets.shape} != ({branch_in.shape[0]},)")
    out, cache = _forward_full(params, branch_in, trunk_in)
    resid = out - targets
    n = out.shape[0]
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")

    depth = len(params.branch_layers)
    g_b = [Linear(np.zeros_like(l.weight), np.zeros_like(l.bias))
           for l in params.branch_layers]
    g_t = [Linear(np.zeros_like(l.weight), np.zeros_like(l.bias))
           for l in params.trunk_layers]
    d_u = np.zeros_like(cache["u_enc"])
    d_v = np.zeros_like(cache["v_enc"])

    d_out = (2.0 / n) * resid
    d_hb = d_out[:, None] * cache["trunk"]["h_out"]
    d_ht = d_out[:, None] * cache["branch"]["h_out"]
    _tower_backward(params.branch_layers, cache["branch"], d_hb,
                    cache["u_enc"], cache["v_enc"], g_b, d_u, d_v)
    _tower_backward(params.trunk_layers, cache["trunk"], d_ht,
                    cache["u_enc"], cache["v_enc"], g_t, d_u, d_v)

    d_au = d_u * tanh_grad(cache["u_enc"])
    d_av = d_v * tanh_grad(cache["v_enc"])
    g_be = Linear(cache["branch_in"].T @ d_au, d_au.sum(axis=0))
    g_te = Linear(cache["trunk_in"].T @ d_av, d_av.sum(axis=0))
    return loss, NetParams(g_be, g_te, g_b, g_t)


@dataclass
class GradCheckResult:
    """Worst disagreement between analytic and finite-difference gradients.

    An entry passes when its relative error is below rel_tol or its absolute
    error is below abs_tol; entries with differences dominated by
    finite-difference roundoff (tiny gradients) are excused by the absolute
    branch. max_rel_error ranges over entries not excused by abs_tol;
    max_abs_error ranges over entries not excused by rel_tol.
    """

    max_rel_error: float
    max_rel_location: tuple[str, int]
    max_abs_error: float
    max_abs_location: tuple[str, int]
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8

    def within(self, rel_tol: float | None = None,
               abs_tol: float | None = None) -> bool:
        rel_tol = self.rel_tol if rel_tol is None else rel_tol
        abs_tol = self.abs_tol if abs_tol is None else abs_tol
        return self.max_rel_error < rel_tol or self.max_abs_error < abs_tol


def grad_check(params: NetParams, branch_in: np.ndarray, trunk_in: np.ndarray,
               targets: np.ndarray, h: float = 1e-6, rel_tol: float = 1e-6,
               abs_tol: float = 1e-8) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    Every parameter entry is perturbed by +-h around its value and the loss
    difference quotient is compared with the analytic gradient. An entry is
    in violation only if both its relative error (against the larger of the
    two magnitudes) reaches rel_tol and its absolute error reaches abs_tol.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    _, grads = loss_and_grads(params, branch_in, trunk_in, targets)
    flat_p = params.flat()
    flat_g = grads.flat()
    names = params.flat_names()
    depth = len(params.branch_layers)

    def loss_of(arrays: list[np.ndarray]) -> float:
        p = NetParams.from_flat(arrays, depth)
        out = forward_batch(p, branch_in, trunk_in)
        r = out - targets
        return float(np.mean(r * r))

    max_rel, rel_loc = 0.0, ("", 0)
    max_abs, abs_loc = 0.0, ("", 0)
    work = [a.copy() for a in flat_p]
    for k, arr in enumerate(work):
        flat_view = arr.reshape(-1)
        g_view = flat_g[k].reshape(-1)
        for j in range(flat_view.size):
            orig = flat_view[j]
            flat_view[j] = orig + h
            up = loss_of(work)
            flat_view[j] = orig - h
            down = loss_of(work)
            flat_view[j] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = g_view[j]
            denom = max(abs(analytic), abs(numeric))
            diff = abs(analytic - numeric)
            rel = diff / denom if denom > 0 else 0.0
            if diff >= abs_tol and rel > max_rel:
                max_rel, rel_loc = rel, (names[k], j)
            if rel >= rel_tol and diff > max_abs:
                max_abs, abs_loc = diff, (names[k], j)
    return GradCheckResult(max_rel, rel_loc, max_abs, abs_loc,
                           rel_tol=rel_tol, abs_tol=abs_tol)


# -- checkpoint serialization -------------------------------------------------

@dataclass
class Checkpoint:
    config: NetConfig
    params: NetParams
    norm: NormStats
    version: int = CHECKPOINT_VERSION


def _pack_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    a2 = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    buf.write(struct.pack("<II", a2.shape[0], a2.shape[1]))
    buf.write(np.ascontiguousarray(a2).astype("<f8").tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CorruptCheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _unpack_array(buf) -> np.ndarray:
    rows, cols = struct.unpack("<II", _read_exact(buf, 8))
    data = np.frombuffer(_read_exact(buf, 8 * rows * cols), dtype="<f8")
    return data.reshape(rows, cols).astype(np.float64)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    c = ckpt.config
    buf.write(struct.pack("<IIIII", ckpt.version, c.branch_input_dim,
                          c.trunk_input_dim, c.width, c.depth))
    buf.write(struct.pack("<9d", *ckpt.norm.as_tuple()))
    for arr in ckpt.params.flat():
        _pack_array(buf, arr)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ckpt))


def checkpoint_from_bytes(data: bytes, expect: NetConfig | None = None) -> Checkpoint:
    buf = io.BytesIO(data)
    magic = buf.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}")
    version, b_dim, t_dim, width, depth = struct.unpack("<IIIII", _read_exact(buf, 20))
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    config = NetConfig(b_dim, t_dim, width, depth)
    if expect is not None and config != expect:
        raise CorruptCheckpointError(f"checkpoint config {config} does not match expected {expect}")
    norm = NormStats.from_tuple(struct.unpack("<9d", _read_exact(buf, 72)))

    expected_shapes = _param_shapes(config)
    arrays = []
    for name, shape in expected_shapes:
        arr = _unpack_array(buf)
        want = shape if len(shape) == 2 else (1, shape[0])
        if arr.shape != want:
            raise CorruptCheckpointError(f"{name}: stored shape {arr.shape}, expected {want}")
        arrays.append(arr if len(shape) == 2 else arr.reshape(shape[0]))
    if buf.read(1):
        raise CorruptCheckpointError("trailing bytes after parameter blocks")
    return Checkpoint(config, NetParams.from_flat(arrays, depth), norm, version)


def load_checkpoint(path, expect: NetConfig | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}")
    return checkpoint_from_bytes(blob, expect)


def _param_shapes(config: NetConfig) -> list[tuple[str, tuple]]:
    w = config.width
    shapes = [("branch_encoder.weight", (config.branch_input_dim, w)),
              ("branch_encoder.bias", (w,)),
              ("trunk_encoder.weight", (config.trunk_input_dim, w)),
              ("trunk_encoder.bias", (w,))]
    dims = [config.branch_input_dim] + [w] * (config.depth - 1)
    for i, d in enumerate(dims):
        shapes.append((f"branch_layers[{i}].weight", (d, w)))
        shapes.append((f"branch_layers[{i}].bias", (w,)))
    dims = [config.trunk_input_dim] + [w] * (config.depth - 1)
    for i, d in enumerate(dims):
        shapes.append((f"trunk_layers[{i}].weight", (d, w)))
        shapes.append((f"trunk_layers[{i}].bias", (w,)))
    return shapes
