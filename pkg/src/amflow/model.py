"""Toy text-free video diffusion transformer.

Full spatio-temporal self-attention over patch tokens, additive 3-d
sinusoidal positional embeddings, a learned timestep/condition table
standing in for prompt conditioning, and a deterministic DDIM sampler.
The latent space is pixel space (identity codec), so clips and latents
share dims (frames, channels, height, width).

Read-only hooks expose head-averaged Q/K/V at a chosen block (for motion
flow extraction) and per-head K/V (for injection caches); arming either
never changes the predicted noise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .formats import read_vtns, write_vtns
from .tensor import Tensor


class ConfigError(ValueError):
    """A configuration field violates its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 4
    channels: int = 1
    height: int = 16
    width: int = 16
    patch: int = 2
    dim: int = 64
    heads: int = 4
    depth: int = 4
    steps: int = 50
    cond_vocab: int = 6

    def __post_init__(self):
        if self.frames < 2:
            raise ConfigError(f"frames must be >= 2, got {self.frames}")
        if self.depth < 1 or self.steps < 1:
            raise ConfigError("depth and steps must be >= 1")
        if self.patch <= 0 or self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"patch {self.patch} must divide height {self.height} and width {self.width}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4:
            raise ConfigError(f"dim {self.dim} not divisible by 4 (positional split)")
        if self.cond_vocab < 1:
            raise ConfigError("cond_vocab must be >= 1")

    @property
    def grid_w(self):
        return self.width // self.patch

    @property
    def grid_h(self):
        return self.height // self.patch

    @property
    def tokens_per_frame(self):
        return self.grid_h * self.grid_w

    @property
    def seq_len(self):
        return self.frames * self.tokens_per_frame

    @property
    def head_dim(self):
        return self.dim // self.heads

    @property
    def patch_vec(self):
        return self.patch * self.patch * self.channels

    def latent_shape(self):
        return (self.frames, self.channels, self.height, self.width)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def token_index(cfg, frame, row, col):
    """Sequence index of the patch at (frame, patch-row, patch-col)."""
    return frame * cfg.tokens_per_frame + row * cfg.grid_w + col


def token_coords(cfg, index):
    """Inverse of token_index."""
    frame, rest = divmod(index, cfg.tokens_per_frame)
    row, col = divmod(rest, cfg.grid_w)
    return frame, row, col


def patch_tokens(z, cfg):
    """Rearrange a latent into per-patch vectors, frame-major raster order.

    (frames, channels, H, W) -> (frames*S, patch*patch*channels); each row
    holds one patch, channel-major with raster order inside the patch.
    Differentiable (pure reshape/permute).
    """
    f, c, h, w = cfg.frames, cfg.channels, cfg.height, cfg.width
    p = cfg.patch
    if z.shape != (f, c, h, w):
        raise T.ShapeError(f"patch_tokens: latent {z.shape} vs config {(f, c, h, w)}")
    x = T.reshape(z, (f, c, h // p, p, w // p, p))
    x = T.permute(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (cfg.seq_len, cfg.patch_vec))


def unpatch_tokens(tokens, cfg):
    """Inverse of patch_tokens: (frames*S, patch*patch*channels) -> latent."""
    f, c, h, w = cfg.frames, cfg.channels, cfg.height, cfg.width
    p = cfg.patch
    if tokens.shape != (cfg.seq_len, cfg.patch_vec):
        raise T.ShapeError(
            f"unpatch_tokens: tokens {tokens.shape} vs expected {(cfg.seq_len, cfg.patch_vec)}")
    x = T.reshape(tokens, (f, h // p, w // p, c, p, p))
    x = T.permute(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (f, c, h, w))


def _sincos_1d(positions, dim):
    """Classic interleaved sin/cos table: rows index positions."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    n_freq = (dim + 1) // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(n_freq) / dim))
    angles = pos * freqs[None, :]
    table = np.zeros((pos.shape[0], 2 * n_freq))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table[:, :dim]


@dataclass
class PositionalEmbedding:
    """Additive embedding: fixed sinusoidal base plus an optimizable delta."""

    base: np.ndarray
    delta: np.ndarray

    def effective(self):
        """base + delta; returns the base itself while delta is all zero."""
        if not self.delta.any():
            return self.base
        return self.base + self.delta


def build_posemb(cfg, dtype=np.float32):
    """3-d sinusoidal base table: dim/2 temporal, dim/4 row, dim/4 column."""
    if cfg.dim % 4:
        raise ConfigError(f"dim {cfg.dim} not divisible by 4")
    d_t, d_s = cfg.dim // 2, cfg.dim // 4
    t_tab = _sincos_1d(np.arange(cfg.frames), d_t)
    r_tab = _sincos_1d(np.arange(cfg.grid_h), d_s)
    c_tab = _sincos_1d(np.arange(cfg.grid_w), d_s)
    base = np.zeros((cfg.seq_len, cfg.dim))
    for idx in range(cfg.seq_len):
        f, r, c = token_coords(cfg, idx)
        base[idx] = np.concatenate([t_tab[f], r_tab[r], c_tab[c]])
    base = base.astype(dtype)
    return PositionalEmbedding(base=base, delta=np.zeros_like(base))


@dataclass
class DiffusionSchedule:
    """Cumulative signal coefficients alpha_bar over steps 0..T."""

    steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.shape != (self.steps + 1,):
            raise ConfigError(f"alpha_bar must have {self.steps + 1} entries")
        if np.any(np.diff(ab) >= 0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if not (0.999 < ab[0] <= 1.0):
            raise ConfigError(f"alpha_bar[0]={ab[0]} outside (0.999, 1]")
        if ab[-1] >= 0.05:
            raise ConfigError(f"alpha_bar[T]={ab[-1]} must be < 0.05")


def cosine_schedule(steps, final=0.02):
    """alpha_bar(t) = cos^2(t/T * arccos(sqrt(final))): 1 at t=0, final at t=T."""
    theta = np.arccos(np.sqrt(final))
    t = np.arange(steps + 1, dtype=np.float64) / steps
    return DiffusionSchedule(steps=steps, alpha_bar=np.cos(t * theta) ** 2)


def add_noise(z0, t, noise, schedule):
    """Forward diffusion: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * noise."""
    if not 0 <= t <= schedule.steps:
        raise ValueError(f"t={t} outside [0, {schedule.steps}]")
    ab = schedule.alpha_bar[t]
    dt = z0.dtype.type
    return dt(np.sqrt(ab)) * z0 + dt(np.sqrt(1.0 - ab)) * noise


def ddim_step(z_t, eps_hat, t, schedule):
    """Deterministic DDIM update from step t to t-1."""
    if not 1 <= t <= schedule.steps:
        raise ValueError(f"ddim_step: t={t} outside [1, {schedule.steps}]")
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    dt = z_t.dtype.type
    z0_hat = (z_t - dt(np.sqrt(1.0 - ab_t)) * eps_hat) / dt(np.sqrt(ab_t))
    return dt(np.sqrt(ab_prev)) * z0_hat + dt(np.sqrt(1.0 - ab_prev)) * eps_hat


@dataclass
class AttentionCapture:
    """Head-averaged Q/K/V of one block, shaped (frames, S, head_dim)."""

    block: int
    q: Tensor
    k: Tensor
    v: Tensor


@dataclass
class KVCache:
    """Per-head K/V of one block, shaped (frames*S, heads, head_dim)."""

    block: int
    k: np.ndarray
    v: np.ndarray


@dataclass
class ForwardResult:
    eps: Tensor | None
    capture: AttentionCapture | None = None
    head_kv: KVCache | None = None


_BLOCK_PARAMS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                 "ln2_g", "ln2_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


class DiTModel:
    """Weights plus the token-space denoising forward pass."""

    def __init__(self, config, params, schedule=None):
        self.config = config
        self.params = params
        self.schedule = schedule or cosine_schedule(config.steps)
        self.posemb = build_posemb(config, dtype=params["patch_w"].dtype)

    @classmethod
    def init_random(cls, config, seed=0, dtype=np.float32):
        """Fresh model; output head starts at zero so eps_hat starts at zero.

        Query and key projections start tied (Wq == Wk), making initial
        attention logits a symmetric token-similarity form; content-matching
        cross-frame attention then survives training at this tiny scale.
        """
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        d, hidden = config.dim, 4 * config.dim

        def normal(shape, std):
            return rng.standard_normal(shape).astype(dtype) * dtype(std)

        params = {
            "patch_w": normal((config.patch_vec, d), 1.0 / np.sqrt(config.patch_vec)),
            "patch_b": np.zeros(d, dtype=dtype),
            "time_emb": normal((config.steps + 1, d), 0.02),
            "cond_emb": normal((config.cond_vocab + 1, d), 0.02),
            "final_ln_g": np.ones(d, dtype=dtype),
            "final_ln_b": np.zeros(d, dtype=dtype),
            "head_w": np.zeros((d, config.patch_vec), dtype=dtype),
            "head_b": np.zeros(config.patch_vec, dtype=dtype),
        }
        for i in range(config.depth):
            wq = normal((d, d), 1.0 / np.sqrt(d))
            params.update({
                f"block{i}.ln1_g": np.ones(d, dtype=dtype),
                f"block{i}.ln1_b": np.zeros(d, dtype=dtype),
                f"block{i}.wq": wq,
                f"block{i}.wk": wq.copy(),
                f"block{i}.wv": normal((d, d), 1.0 / np.sqrt(d)),
                f"block{i}.wo": normal((d, d), 1.0 / np.sqrt(d)),
                f"block{i}.ln2_g": np.ones(d, dtype=dtype),
                f"block{i}.ln2_b": np.zeros(d, dtype=dtype),
                f"block{i}.mlp_w1": normal((d, hidden), 1.0 / np.sqrt(d)),
                f"block{i}.mlp_b1": np.zeros(hidden, dtype=dtype),
                f"block{i}.mlp_w2": normal((hidden, d), 1.0 / np.sqrt(hidden)),
                f"block{i}.mlp_b2": np.zeros(d, dtype=dtype),
            })
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["patch_w"].dtype

    def param_tensors(self, requires_grad=False):
        """Wrap every weight as a Tensor (shared storage), e.g. for training."""
        return {name: Tensor(arr, requires_grad=requires_grad) for name, arr in self.params.items()}

    def base_pos(self):
        """Base positional table as an inference Tensor."""
        return Tensor(self.posemb.base)

    def forward(self, z, t, cond, pos, capture_block=None, kv_cache=None,
                head_kv_block=None, stop_after=None, params=None, ln1_sink=None):
        """One denoising pass epsilon(z, cond, t, pos).

        z: latent Tensor (frames, channels, H, W); pos: effective positional
        table (frames*S, dim), tape-connected when it is being optimized.
        capture_block arms the head-averaged Q/K/V hook; head_kv_block arms
        the per-head K/V hook; kv_cache replaces K/V at its block; ln1_sink
        (a dict) collects each block's pre-attention activations, used for
        data-driven init. All hooks are read-only for the predicted noise.
        stop_after ends the pass after that block (eps is None), for
        capture-only work.
        """
        cfg = self.config
        if not 0 <= t <= cfg.steps:
            raise ValueError(f"t={t} outside [0, {cfg.steps}]")
        if not 0 <= cond <= cfg.cond_vocab:
            raise ValueError(f"cond={cond} outside [0, {cfg.cond_vocab}]")
        for name, blk in (("capture", capture_block), ("head_kv", head_kv_block),
                          ("stop_after", stop_after)):
            if blk is not None and not 0 <= blk < cfg.depth:
                raise ValueError(f"{name} block {blk} out of range for depth {cfg.depth}")
        if kv_cache is not None and not 0 <= kv_cache.block < cfg.depth:
            raise ValueError(f"kv_cache block {kv_cache.block} out of range")
        if pos.shape != (cfg.seq_len, cfg.dim):
            raise T.ShapeError(f"pos table {pos.shape} vs expected {(cfg.seq_len, cfg.dim)}")

        p = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        n_tok, m, dh = cfg.seq_len, cfg.heads, cfg.head_dim

        tokens = T.matmul(patch_tokens(z, cfg), p["patch_w"]) + p["patch_b"]
        tokens = tokens + pos
        tokens = tokens + T.gather_rows(p["time_emb"], [t])
        tokens = tokens + T.gather_rows(p["cond_emb"], [cond])

        capture = None
        head_kv = None
        for i in range(cfg.depth):
            h = T.layer_norm(tokens, p[f"block{i}.ln1_g"], p[f"block{i}.ln1_b"])
            if ln1_sink is not None:
                ln1_sink.setdefault(i, []).append(h.data.copy())
            qh = _split_heads(T.matmul(h, p[f"block{i}.wq"]), n_tok, m, dh)
            kh = _split_heads(T.matmul(h, p[f"block{i}.wk"]), n_tok, m, dh)
            vh = _split_heads(T.matmul(h, p[f"block{i}.wv"]), n_tok, m, dh)

            if kv_cache is not None and kv_cache.block == i:
                if kv_cache.k.shape != (n_tok, m, dh):
                    raise T.ShapeError(
                        f"kv_cache shape {kv_cache.k.shape} vs expected {(n_tok, m, dh)}")
                kh = Tensor(np.transpose(kv_cache.k, (1, 0, 2)).astype(self.dtype, copy=True))
                vh = Tensor(np.transpose(kv_cache.v, (1, 0, 2)).astype(self.dtype, copy=True))

            if head_kv_block == i:
                head_kv = KVCache(
                    block=i,
                    k=np.transpose(kh.data, (1, 0, 2)).copy(),
                    v=np.transpose(vh.data, (1, 0, 2)).copy(),
                )
            if capture_block == i:
                capture = AttentionCapture(
                    block=i,
                    q=T.reshape(T.mean_axis(qh, 0), (cfg.frames, cfg.tokens_per_frame, dh)),
                    k=T.reshape(T.mean_axis(kh, 0), (cfg.frames, cfg.tokens_per_frame, dh)),
                    v=T.reshape(T.mean_axis(vh, 0), (cfg.frames, cfg.tokens_per_frame, dh)),
                )

            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
            ctx = T.matmul(T.softmax(scores), vh)
            ctx = T.reshape(T.permute(ctx, (1, 0, 2)), (n_tok, cfg.dim))
            tokens = tokens + T.matmul(ctx, p[f"block{i}.wo"])

            h2 = T.layer_norm(tokens, p[f"block{i}.ln2_g"], p[f"block{i}.ln2_b"])
            inner = T.gelu(T.matmul(h2, p[f"block{i}.mlp_w1"]) + p[f"block{i}.mlp_b1"])
            tokens = tokens + (T.matmul(inner, p[f"block{i}.mlp_w2"]) + p[f"block{i}.mlp_b2"])

            if stop_after == i:
                return ForwardResult(eps=None, capture=capture, head_kv=head_kv)

        out = T.layer_norm(tokens, p["final_ln_g"], p["final_ln_b"])
        out = T.matmul(out, p["head_w"]) + p["head_b"]
        return ForwardResult(eps=unpatch_tokens(out, cfg), capture=capture, head_kv=head_kv)


def _split_heads(x, n_tok, m, dh):
    return T.permute(T.reshape(x, (n_tok, m, dh)), (1, 0, 2))


def calibrate_attention_init(model, latents, conds=None, scale=0.5):
    """Data-driven query/key init from activation statistics.

    Per block: project onto the top head_dim principal directions of that
    block's pre-attention activations, every head sharing one projection
    and Wq == Wk. Head-averaged Q/K then act as a token-content matcher
    from the start, which random head slices at this width cannot (the
    head average of independent slices buries the similarity signal in
    cross-head noise). Blocks are calibrated in order because each block's
    activations depend on the weights before it. Value/output projections
    stay random, so heads differentiate during training.
    """
    cfg = model.config
    conds = list(conds) if conds is not None else [0] * len(latents)
    for block in range(cfg.depth):
        sink = {}
        for z, cond in zip(latents, conds):
            model.forward(Tensor(np.asarray(z, dtype=model.dtype)), 0, cond,
                          model.base_pos(), stop_after=block, ln1_sink=sink)
        h = np.concatenate(sink[block], axis=0).astype(np.float64)
        h -= h.mean(axis=0)
        _, _, vt = np.linalg.svd(h, full_matrices=False)
        basis = (vt[:cfg.head_dim].T * scale).astype(model.dtype)
        tiled = np.tile(basis, (1, cfg.heads))
        model.params[f"block{block}.wq"] = tiled.copy()
        model.params[f"block{block}.wk"] = tiled.copy()
    return model


def sample_video(model, cond, seed, pos=None, trace=None):
    """Plain deterministic DDIM sampling from seeded Gaussian noise."""
    cfg = model.config
    rng = rng_stream(seed, STREAM_INIT_LATENT)
    z = rng.standard_normal(cfg.latent_shape()).astype(model.dtype)
    pos = pos if pos is not None else model.base_pos()
    for t in range(cfg.steps, 0, -1):
        eps = model.forward(Tensor(z), t, cond, pos).eps
        z = ddim_step(z, eps.data, t, model.schedule)
        if trace is not None:
            trace.append(z.copy())
    return z


STREAM_INIT_LATENT = 0
STREAM_TRAIN_ORDER = 1
STREAM_TRAIN_NOISE = 2


def rng_stream(seed, stream):
    """Deterministic per-consumer generator split from one run seed."""
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(int(stream),))
    return np.random.default_rng(ss)


def save_checkpoint(model, directory):
    """Checkpoint = VTNS tensor per weight plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, arr in sorted(model.params.items()):
        fname = name.replace(".", "_") + ".vtns"
        write_vtns(directory / fname, arr)
        tensors[name] = fname
    manifest = {"config": model.config.to_dict(), "tensors": tensors}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    config = ModelConfig(**manifest["config"])
    params = {name: read_vtns(directory / fname) for name, fname in manifest["tensors"].items()}
    return DiTModel(config, params)
