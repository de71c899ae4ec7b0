"""Guided denoising: optimize latents or positional deltas against a
reference motion flow.

One generation run walks t = T..1. Inside the guided window (the highest
ceil(fraction * T) step values) each step runs a fixed number of Adam
updates on either the noisy latent or the positional-embedding delta,
driven by the squared distance between the reference flow and the soft
flow of the current capture. Outside the window the positional table
reverts to its base and denoising proceeds plainly. Keys/values captured
from the clean reference can be injected at one block throughout.
"""

from __future__ import annotations

import json
import math
import tempfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .flow import amf_loss, flow_from_capture
from .formats import read_vtns, write_vtns
from .model import (
    STREAM_INIT_LATENT,
    KVCache,
    ddim_step,
    rng_stream,
)
from .tensor import Tape, Tensor


class GuidanceDiverged(RuntimeError):
    """The guidance loss went non-finite; run aborted with a state dump."""


@dataclass
class GuidanceConfig:
    """Everything one guided run needs besides the model and reference flow."""

    block: int
    tau: float = 2.0
    k_opt: int = 5
    t_opt_fraction: float = 0.2
    lr_start: float = 0.002
    lr_end: float = 0.001
    target_mode: str = "latent"
    inject_kv: bool = True
    injection_block: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.t_opt_fraction <= 1.0:
            raise ValueError(f"t_opt_fraction {self.t_opt_fraction} outside [0, 1]")
        if self.k_opt < 0:
            raise ValueError("k_opt must be >= 0")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.target_mode not in ("latent", "posemb"):
            raise ValueError(f"target_mode must be latent|posemb, got {self.target_mode!r}")
        if self.block < 0 or self.injection_block < 0:
            raise ValueError("block indices must be >= 0")

    def to_dict(self):
        return asdict(self)


def guided_step_count(cfg, total_steps):
    """Number of guided steps: the highest ceil(fraction * T) values of t."""
    return int(math.ceil(cfg.t_opt_fraction * total_steps - 1e-9))


def t_opt_threshold(cfg, total_steps):
    """Steps with t > threshold are guided."""
    return total_steps - guided_step_count(cfg, total_steps)


def guided_steps(cfg, total_steps):
    """Descending guided step values."""
    return list(range(total_steps, t_opt_threshold(cfg, total_steps), -1))


def lr_at(t, cfg, total_steps):
    """Linear schedule: lr_start at t=T down to lr_end at the last guided step.

    Constant across the inner Adam updates of one denoising step. A window
    of length one degenerates to lr_start.
    """
    n = guided_step_count(cfg, total_steps)
    threshold = total_steps - n
    if not threshold < t <= total_steps:
        raise ValueError(f"t={t} outside guided window ({threshold}, {total_steps}]")
    if n == 1:
        return cfg.lr_start
    frac = (total_steps - t) / (n - 1)
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


class Adam:
    """Plain Adam on one ndarray target; moments live as long as the instance."""

    def __init__(self, shape, dtype=np.float32, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape, dtype=np.float64)
        self.v = np.zeros(shape, dtype=np.float64)
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.dtype = np.dtype(dtype)

    def update(self, values, grad, lr):
        """One in-place update of `values`."""
        g = np.asarray(grad, dtype=np.float64)
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1 ** self.step)
        v_hat = self.v / (1.0 - self.beta2 ** self.step)
        values -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(values.dtype)


def capture_reference_kv(model, z_ref, block):
    """Per-head K/V of one block from the clean reference at t=0, empty condition."""
    cfg = model.config
    if not 0 <= block < cfg.depth:
        raise ValueError(f"injection block {block} out of range for depth {cfg.depth}")
    if z_ref.shape != cfg.latent_shape():
        raise T.ShapeError(f"reference {z_ref.shape} vs model {cfg.latent_shape()}")
    result = model.forward(Tensor(np.asarray(z_ref, dtype=model.dtype)), 0, 0,
                           model.base_pos(), head_kv_block=block, stop_after=block)
    return result.head_kv


def optimize_step(model, z, delta, ref_flow, cfg, adam, t, cond, lr, kv_cache=None,
                  dump_dir=None):
    """One inner guidance update; returns the pre-update loss.

    Mutates `z` in place in latent mode, `delta` in posemb mode; the other
    target is never touched. A non-finite loss aborts the run after dumping
    the offending state.
    """
    latent_mode = cfg.target_mode == "latent"
    z_t = Tensor(z, requires_grad=latent_mode)
    delta_t = Tensor(delta, requires_grad=not latent_mode)
    with Tape() as tape:
        if latent_mode:
            pos = model.base_pos()  # delta is pinned to zero in latent mode
        else:
            pos = T.add(Tensor(model.posemb.base), delta_t)
        res = model.forward(z_t, t, cond, pos, capture_block=cfg.block,
                            kv_cache=kv_cache, stop_after=cfg.block)
        soft = flow_from_capture(res.capture.q, res.capture.k, cfg.tau,
                                 model.config.grid_h, model.config.grid_w, mode="soft")
        loss = amf_loss(ref_flow, soft)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            path = _dump_divergence(dump_dir, z, delta, t, cond, cfg)
            raise GuidanceDiverged(f"non-finite guidance loss at t={t}; state dumped to {path}")
        tape.backward(loss)
    grad = z_t.grad if latent_mode else delta_t.grad
    adam.update(z if latent_mode else delta, grad, lr)
    return loss_value


def _dump_divergence(dump_dir, z, delta, t, cond, cfg):
    directory = Path(dump_dir) if dump_dir else Path(tempfile.mkdtemp(prefix="amflow-diverged-"))
    directory.mkdir(parents=True, exist_ok=True)
    write_vtns(directory / "latent.vtns", z)
    write_vtns(directory / "posemb_delta.vtns", delta)
    (directory / "context.json").write_text(json.dumps(
        {"t": t, "cond": cond, "guidance": cfg.to_dict()}, indent=2, sort_keys=True))
    return directory


@dataclass
class OptimizedStateSet:
    """Per-guided-step optimization targets recorded for zero-shot replay.

    kind "posemb": positional delta tables (the reusable, content-free
    carrier). kind "latent": the optimized noisy latents themselves, which
    replay motion but leak the optimization condition's content.
    """

    kind: str
    steps: dict
    reference: str = ""
    cond: int = 0
    config_hash: str = ""

    def step_values(self):
        return sorted(self.steps.keys())


@dataclass
class GuidedRun:
    video: np.ndarray
    loss_trace: list
    states: OptimizedStateSet | None


def guided_generate(model, ref_flow, cond, cfg, kv_cache=None, reference_id="",
                    dump_dir=None, stop_after_window=False):
    """Full guided sampling run (Algorithm: guided window, then plain DDIM).

    Returns the decoded video (identity codec), the per-step loss trace as
    (t, inner_step, loss, lr) rows, and the recorded per-step states for
    zero-shot reuse. With k_opt=0 and no injection this reduces exactly to
    plain DDIM sampling. `stop_after_window` ends the run once the guided
    window has been left (video is then the intermediate latent), for
    loss-trace studies that do not need the final video.
    """
    mcfg = model.config
    if (ref_flow.frames, ref_flow.grid_h, ref_flow.grid_w) != \
            (mcfg.frames, mcfg.grid_h, mcfg.grid_w):
        raise ValueError(
            f"reference flow geometry {ref_flow.geometry()} vs model "
            f"{(mcfg.frames, mcfg.grid_h, mcfg.grid_w)}")
    if cfg.block >= mcfg.depth:
        raise ValueError(f"guidance block {cfg.block} out of range for depth {mcfg.depth}")
    cache = kv_cache if cfg.inject_kv else None

    total = mcfg.steps
    threshold = t_opt_threshold(cfg, total)
    rng = rng_stream(cfg.seed, STREAM_INIT_LATENT)
    z = rng.standard_normal(mcfg.latent_shape()).astype(model.dtype)
    delta = np.zeros_like(model.posemb.base)

    states = OptimizedStateSet(kind=cfg.target_mode, steps={}, reference=reference_id,
                               cond=cond, config_hash=mcfg.config_hash())
    trace = []
    for t in range(total, 0, -1):
        guided = t > threshold and cfg.k_opt > 0
        if stop_after_window and t <= threshold:
            break
        if guided:
            lr = lr_at(t, cfg, total)
            target_shape = z.shape if cfg.target_mode == "latent" else delta.shape
            adam = Adam(target_shape, dtype=model.dtype)
            for k in range(cfg.k_opt):
                loss = optimize_step(model, z, delta, ref_flow, cfg, adam, t, cond, lr,
                                     kv_cache=cache, dump_dir=dump_dir)
                trace.append({"t": t, "inner_step": k, "loss": loss, "lr": lr})
            states.steps[t] = (delta if cfg.target_mode == "posemb" else z).copy()
        elif cfg.target_mode == "posemb":
            delta = np.zeros_like(delta)

        if guided and cfg.target_mode == "posemb":
            pos = Tensor(model.posemb.base + delta)
        else:
            pos = model.base_pos()
        eps = model.forward(Tensor(z), t, cond, pos, kv_cache=cache).eps
        z = ddim_step(z, eps.data, t, model.schedule)
    return GuidedRun(video=z, loss_trace=trace,
                     states=states if states.steps else None)


def zero_shot_generate(model, states, new_cond, cfg, kv_cache=None):
    """Replay recorded per-step states under a new condition, no optimization.

    posemb states re-apply stored positional deltas at their recorded steps;
    latent states substitute the stored optimized latents. Pure function of
    (weights, states, condition, seed).
    """
    mcfg = model.config
    if states.config_hash and states.config_hash != mcfg.config_hash():
        raise ValueError(
            f"state set was recorded for config {states.config_hash}, "
            f"model is {mcfg.config_hash()}")
    total = mcfg.steps
    required = set(guided_steps(cfg, total))
    missing = required - set(states.steps.keys())
    if missing:
        raise ValueError(f"state set is missing guided steps {sorted(missing)}")
    cache = kv_cache if cfg.inject_kv else None

    rng = rng_stream(cfg.seed, STREAM_INIT_LATENT)
    z = rng.standard_normal(mcfg.latent_shape()).astype(model.dtype)
    for t in range(total, 0, -1):
        pos = model.base_pos()
        if t in required:
            if states.kind == "posemb":
                pos = Tensor(model.posemb.base + states.steps[t].astype(model.dtype))
            else:
                z = states.steps[t].astype(model.dtype).copy()
        eps = model.forward(Tensor(z), t, new_cond, pos, kv_cache=cache).eps
        z = ddim_step(z, eps.data, t, model.schedule)
    return z


def save_state_set(states, directory):
    """Directory of per-step VTNS tables plus JSON provenance."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for t, table in sorted(states.steps.items()):
        fname = f"step_{t:04d}.vtns"
        write_vtns(directory / fname, table)
        files[str(t)] = fname
    provenance = {
        "kind": states.kind,
        "reference": states.reference,
        "cond": states.cond,
        "config_hash": states.config_hash,
        "steps": files,
    }
    (directory / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))


def load_state_set(directory):
    directory = Path(directory)
    prov_path = directory / "provenance.json"
    if not prov_path.exists():
        raise FileNotFoundError(f"no state-set provenance at {prov_path}")
    prov = json.loads(prov_path.read_text())
    steps = {int(t): read_vtns(directory / fname) for t, fname in prov["steps"].items()}
    return OptimizedStateSet(kind=prov["kind"], steps=steps, reference=prov["reference"],
                             cond=prov["cond"], config_hash=prov["config_hash"])
