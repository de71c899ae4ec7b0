"""Cross-frame attention and patch motion flows.

From captured per-frame queries/keys, build row-stochastic cross-frame
attention, reduce it to per-patch displacement maps (hard argmax for the
reference, soft expectation for the optimized side), aggregate all frame
pairs into a motion flow, and score the squared distance between two
flows.

Coordinate convention, fixed for bit-exact fixtures: u = patch column
(width axis), v = patch row (height axis), origin top-left, units of
patch-grid cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .formats import read_vtns, write_vtns
from .model import patch_tokens
from .tensor import Tensor

COORD_CONVENTION = "u=col,v=row"


@dataclass
class CrossFrameAttention:
    """Row-stochastic attention from patches of frame i to patches of frame j."""

    source: int
    target: int
    matrix: Tensor
    tau: float


@dataclass
class DisplacementMap:
    """Per-patch (du, dv) offsets from frame `source` into frame `target`.

    Hard maps hold integer-valued ndarrays; soft maps hold tape-connected
    Tensors so gradients can flow back into the attention.
    """

    source: int
    target: int
    delta: object
    mode: str

    def values(self):
        return self.delta.data if isinstance(self.delta, Tensor) else self.delta


@dataclass
class MotionFlow:
    """All frames^2 displacement maps of one clip, a single mode throughout."""

    frames: int
    grid_h: int
    grid_w: int
    mode: str
    maps: dict = field(default_factory=dict)
    tau: float | None = None
    block: int | None = None

    @property
    def patches(self):
        return self.grid_h * self.grid_w

    def geometry(self):
        return (self.frames, self.grid_h, self.grid_w)

    def pairs(self):
        """Deterministic (i, j) iteration order."""
        return sorted(self.maps.keys())

    def values_array(self):
        """Dense (frames, frames, S, 2) view of all displacement values."""
        out = np.zeros((self.frames, self.frames, self.patches, 2), dtype=np.float32)
        for (i, j), dmap in self.maps.items():
            out[i, j] = dmap.values()
        return out

    def validate(self):
        expected = {(i, j) for i in range(self.frames) for j in range(self.frames)}
        if set(self.maps.keys()) != expected:
            raise ValueError(
                f"motion flow must hold exactly frames^2={len(expected)} maps, got {len(self.maps)}")
        for dmap in self.maps.values():
            if dmap.mode != self.mode:
                raise ValueError("all maps in a motion flow must share one mode")
        return self


def _grid_coords(grid_h, grid_w, dtype=np.float64):
    """(S, 2) array of (u, v) cell coordinates in raster order."""
    v, u = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return np.stack([u, v], axis=1).astype(dtype)


def cross_frame_attention(q_i, k_j, tau, source=0, target=0):
    """softmax(tau * Q_i K_j^T / sqrt(d_k)) row-wise; differentiable."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if not isinstance(q_i, Tensor):
        q_i = Tensor(q_i)
    if not isinstance(k_j, Tensor):
        k_j = Tensor(k_j)
    if q_i.ndim != 2 or q_i.shape[1] != k_j.shape[1]:
        raise T.ShapeError(f"cross_frame_attention: {q_i.shape} vs {k_j.shape}")
    d_k = q_i.shape[1]
    logits = T.scale(T.matmul(q_i, T.transpose(k_j)), 1.0 / np.sqrt(d_k))
    return CrossFrameAttention(source=source, target=target,
                               matrix=T.softmax(logits, temperature=tau), tau=float(tau))


def hard_displacement(attn, grid_h, grid_w):
    """Argmax displacement; ties resolve to the lowest patch index."""
    a = attn.matrix.data
    s = grid_h * grid_w
    if a.shape != (s, s):
        raise T.ShapeError(f"attention {a.shape} vs grid {grid_h}x{grid_w}")
    coords = _grid_coords(grid_h, grid_w)
    best = np.argmax(a, axis=1)
    delta = (coords[best] - coords).astype(np.float64)
    return DisplacementMap(source=attn.source, target=attn.target, delta=delta, mode="hard")


def soft_displacement(attn, grid_h, grid_w):
    """Attention-weighted expected target cell minus the source cell.

    Convexity keeps every entry inside the patch grid; gradients flow
    through the attention matrix.
    """
    a = attn.matrix
    s = grid_h * grid_w
    if a.shape != (s, s):
        raise T.ShapeError(f"attention {a.shape} vs grid {grid_h}x{grid_w}")
    coords = _grid_coords(grid_h, grid_w, dtype=a.data.dtype)
    expected = T.matmul(a, Tensor(coords))
    delta = T.sub(expected, Tensor(coords))
    return DisplacementMap(source=attn.source, target=attn.target, delta=delta, mode="soft")


def flow_from_capture(q, k, tau, grid_h, grid_w, mode, block=None):
    """Build the all-pairs motion flow from per-frame Q/K stacks.

    q, k: (frames, S, d_k) Tensors or arrays. Soft mode keeps the maps
    differentiable; hard mode produces integer displacement values.
    """
    if not isinstance(q, Tensor):
        q = Tensor(q)
    if not isinstance(k, Tensor):
        k = Tensor(k)
    frames = q.shape[0]
    flow = MotionFlow(frames=frames, grid_h=grid_h, grid_w=grid_w, mode=mode,
                      tau=float(tau), block=block)
    make = hard_displacement if mode == "hard" else soft_displacement
    for i in range(frames):
        q_i = _frame_slice(q, i)
        for j in range(frames):
            k_j = _frame_slice(k, j)
            attn = cross_frame_attention(q_i, k_j, tau, source=i, target=j)
            flow.maps[(i, j)] = make(attn, grid_h, grid_w)
    return flow.validate()


def _frame_slice(x, i):
    """Differentiable (S, d) slice of one frame from a (frames, S, d) tensor."""
    frames, s, d = x.shape
    flat = T.reshape(x, (frames, s * d))
    return T.reshape(T.gather_rows(flat, [i]), (s, d))


def extract_reference_amf(model, z_ref, guidance_cfg):
    """Hard motion flow of a clean clip: one forward at t=0, empty condition."""
    cfg = model.config
    if z_ref.shape != cfg.latent_shape():
        raise T.ShapeError(f"reference {z_ref.shape} vs model {cfg.latent_shape()}")
    result = model.forward(Tensor(np.asarray(z_ref, dtype=model.dtype)), 0, 0,
                           model.base_pos(), capture_block=guidance_cfg.block,
                           stop_after=guidance_cfg.block)
    cap = result.capture
    return flow_from_capture(cap.q, cap.k, guidance_cfg.tau, cfg.grid_h, cfg.grid_w,
                             mode="hard", block=guidance_cfg.block)


def amf_loss(ref_flow, cur_flow):
    """Sum of squared displacement differences over all pairs and patches.

    Plain sum (no normalization); accumulation follows the sorted (i, j)
    pair order for determinism. Differentiable through any soft maps in
    cur_flow.
    """
    if ref_flow.geometry() != cur_flow.geometry():
        raise ValueError(
            f"flow geometry mismatch: {ref_flow.geometry()} vs {cur_flow.geometry()}")
    ref_flow.validate()
    cur_flow.validate()
    total = None
    for key in cur_flow.pairs():
        cur = cur_flow.maps[key].delta
        if not isinstance(cur, Tensor):
            cur = Tensor(cur)
        ref_vals = np.asarray(ref_flow.maps[key].values(), dtype=cur.data.dtype)
        term = T.sum_squares(T.sub(cur, Tensor(ref_vals)))
        total = term if total is None else T.add(total, term)
    return total


def nn_displacement(z_ref, cfg):
    """Hard flow from nearest-neighbor matching of raw latent patch vectors.

    No model involved: for each patch of frame i, the target is the frame-j
    patch at minimum Euclidean distance (ties to the lowest index).
    """
    tokens = patch_tokens(Tensor(np.asarray(z_ref, dtype=np.float64)), cfg).data
    s = cfg.tokens_per_frame
    per_frame = tokens.reshape(cfg.frames, s, cfg.patch_vec)
    coords = _grid_coords(cfg.grid_h, cfg.grid_w)
    flow = MotionFlow(frames=cfg.frames, grid_h=cfg.grid_h, grid_w=cfg.grid_w, mode="hard")
    for i in range(cfg.frames):
        a = per_frame[i]
        for j in range(cfg.frames):
            b = per_frame[j]
            d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
            best = np.argmin(d2, axis=1)
            delta = (coords[best] - coords).astype(np.float64)
            flow.maps[(i, j)] = DisplacementMap(source=i, target=j, delta=delta, mode="hard")
    return flow.validate()


def save_motion_flow(flow, path):
    """VTNS tensor (frames, frames, S, 2) plus a JSON sidecar."""
    path = Path(path)
    flow.validate()
    write_vtns(path, flow.values_array())
    sidecar = {
        "mode": flow.mode,
        "tau": flow.tau,
        "block": flow.block,
        "coords": COORD_CONVENTION,
        "frames": flow.frames,
        "grid_h": flow.grid_h,
        "grid_w": flow.grid_w,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_motion_flow(path):
    path = Path(path)
    values = read_vtns(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    flow = MotionFlow(frames=sidecar["frames"], grid_h=sidecar["grid_h"],
                      grid_w=sidecar["grid_w"], mode=sidecar["mode"],
                      tau=sidecar["tau"], block=sidecar["block"])
    for i in range(flow.frames):
        for j in range(flow.frames):
            flow.maps[(i, j)] = DisplacementMap(
                source=i, target=j, delta=values[i, j].astype(np.float64), mode=flow.mode)
    return flow.validate()
