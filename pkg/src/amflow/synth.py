"""Synthetic clips with analytically known patch motion, and the trainer.

Clips are textured shapes translating over a static background; because
object positions are integer pixels, the per-pair patch displacement is
known exactly, which makes every downstream motion metric checkable
against ground truth. The trainer fits the toy transformer with the
standard noise-prediction objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .formats import read_vtns, write_pgm, write_vtns
from .guidance import Adam
from .model import (
    STREAM_TRAIN_NOISE,
    STREAM_TRAIN_ORDER,
    DiTModel,
    add_noise,
    calibrate_attention_init,
    rng_stream,
)
from .tensor import Tape, Tensor

KINDS = ("square", "disk", "two-objects")
BACKGROUNDS = ("flat", "noise")


def condition_id(kind, background):
    """Stable 1-based condition id for a (shape kind, background) pair; 0 = empty."""
    return KINDS.index(kind) * len(BACKGROUNDS) + BACKGROUNDS.index(background) + 1


@dataclass
class MotionSpec:
    """One clip: a textured shape translating at constant velocity."""

    kind: str
    size: int
    vx: float
    vy: float
    texture_seed: int
    background: str
    start: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if self.size < 1:
            raise ValueError("size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["start"] = list(self.start)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["start"] = tuple(d["start"])
        return cls(**d)


@dataclass
class VideoClip:
    pixels: np.ndarray
    spec: MotionSpec
    cond: int


@dataclass
class FlowField:
    """Exact patch displacement per frame pair, valid on object-covered patches."""

    frames: int
    grid_h: int
    grid_w: int
    delta: np.ndarray  # (frames, frames, S, 2)
    mask: np.ndarray   # (frames, S) bool; patches fully covered in the source frame

    def geometry(self):
        return (self.frames, self.grid_h, self.grid_w)


def _object_tracks(spec, cfg):
    """[(start_xy, velocity_xy, texture_stream_index)] for 1 or 2 objects."""
    x0, y0 = spec.start
    tracks = [((x0, y0), (spec.vx, spec.vy), 0)]
    if spec.kind == "two-objects":
        # second object mirrored through the frame center, opposite velocity
        mx = cfg.width - spec.size - x0
        my = cfg.height - spec.size - y0
        tracks.append(((mx, my), (-spec.vx, -spec.vy), 1))
    return tracks


def _positions(track, frames):
    (x0, y0), (vx, vy), _ = track
    return [(int(round(x0 + f * vx)), int(round(y0 + f * vy))) for f in range(frames)]


def _validate_spec(spec, cfg):
    for track in _object_tracks(spec, cfg):
        for f, (x, y) in enumerate(_positions(track, cfg.frames)):
            if x < 0 or y < 0 or x + spec.size > cfg.width or y + spec.size > cfg.height:
                raise ValueError(
                    f"trajectory leaves the frame at f={f}: object at ({x},{y}) "
                    f"size {spec.size} vs {cfg.width}x{cfg.height}")
    if spec.kind == "two-objects":
        boxes = [_positions(t, cfg.frames) for t in _object_tracks(spec, cfg)]
        for f in range(cfg.frames):
            (ax, ay), (bx, by) = boxes[0][f], boxes[1][f]
            if abs(ax - bx) < spec.size and abs(ay - by) < spec.size:
                raise ValueError(f"objects overlap at f={f}")


def _shape_mask(kind, size):
    if kind == "disk":
        yy, xx = np.mgrid[0:size, 0:size]
        r = (size - 1) / 2.0
        return ((xx - r) ** 2 + (yy - r) ** 2) <= r * r + 0.5
    return np.ones((size, size), dtype=bool)


def gen_clip(spec, cfg):
    """Render one clip and its exact flow field; deterministic given the spec."""
    if cfg.channels != 1:
        raise ValueError("synthetic clips are single-channel")
    _validate_spec(spec, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(spec.texture_seed))
    h, w = cfg.height, cfg.width

    if spec.background == "noise":
        bg = rng.uniform(-1.0, -0.25, size=(h, w))
    else:
        bg = np.full((h, w), rng.uniform(-0.95, -0.6))

    tracks = _object_tracks(spec, cfg)
    textures = [rng.uniform(0.1, 1.0, size=(spec.size, spec.size)) for _ in tracks]
    stencil = _shape_mask("disk" if spec.kind == "disk" else "square", spec.size)
    positions = [_positions(track, cfg.frames) for track in tracks]

    frames = np.empty((cfg.frames, cfg.channels, h, w), dtype=np.float32)
    coverage = np.zeros((cfg.frames, len(tracks), h, w), dtype=bool)
    for f in range(cfg.frames):
        canvas = bg.copy()
        for track in tracks:
            obj = track[2]
            x, y = positions[obj][f]
            region = canvas[y:y + spec.size, x:x + spec.size]
            region[stencil] = textures[obj][stencil]
            cov = np.zeros((h, w), dtype=bool)
            cov[y:y + spec.size, x:x + spec.size] = stencil
            coverage[f, obj] = cov
        frames[f] = np.clip(canvas, -1.0, 1.0).astype(np.float32)[None]

    clip = VideoClip(pixels=frames, spec=spec, cond=condition_id(spec.kind, spec.background))
    return clip, _flow_field(spec, cfg, tracks, coverage)


def _flow_field(spec, cfg, tracks, coverage):
    gh, gw = cfg.grid_h, cfg.grid_w
    s = gh * gw
    p = cfg.patch
    delta = np.zeros((cfg.frames, cfg.frames, s, 2))
    mask = np.zeros((cfg.frames, s), dtype=bool)

    # patch (r, c) of frame f is valid if some object fully covers it
    full = coverage.reshape(cfg.frames, len(tracks), gh, p, gw, p).all(axis=(3, 5))
    for f in range(cfg.frames):
        for track in tracks:
            obj = track[2]
            owned = full[f, obj].reshape(s)
            mask[f] |= owned
            (vx, vy) = track[1]
            for j in range(cfg.frames):
                du = np.rint((j - f) * vx / p)
                dv = np.rint((j - f) * vy / p)
                delta[f, j, owned] = (du, dv)
    return FlowField(frames=cfg.frames, grid_h=gh, grid_w=gw, delta=delta, mask=mask)


def random_spec(cfg, kind, background, rng, exact_cells=False):
    """Draw an in-bounds spec; velocities are integer pixels per frame."""
    step = cfg.patch if exact_cells else 1
    size = int(rng.choice([6, 8])) if cfg.height >= 16 else max(2, cfg.height // 2)
    for _ in range(200):
        vx = int(rng.integers(-3, 4)) // step * step
        vy = int(rng.integers(-3, 4)) // step * step
        travel_x, travel_y = (cfg.frames - 1) * vx, (cfg.frames - 1) * vy
        lo_x, hi_x = max(0, -travel_x), cfg.width - size - max(0, travel_x)
        lo_y, hi_y = max(0, -travel_y), cfg.height - size - max(0, travel_y)
        if hi_x < lo_x or hi_y < lo_y:
            continue
        start = (int(rng.integers(lo_x, hi_x + 1)), int(rng.integers(lo_y, hi_y + 1)))
        spec = MotionSpec(kind=kind, size=size, vx=vx, vy=vy,
                          texture_seed=int(rng.integers(0, 2 ** 63)),
                          background=background, start=start)
        if kind == "two-objects":
            try:
                _validate_spec(spec, cfg)
            except ValueError:
                continue
        return spec
    raise RuntimeError("could not draw an in-bounds motion spec")


def gen_dataset(count, seed, cfg, kinds=KINDS, backgrounds=BACKGROUNDS,
                static_fraction=1 / 3):
    """Balanced clip set: combos assigned round-robin, all clips in-bounds.

    A fixed share of clips is forced static (zero velocity); those teach
    the denoiser that same-position patches across frames share content,
    which keeps its cross-frame attention anchored.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    combos = [(k, b) for k in kinds for b in backgrounds]
    period = max(1, int(round(1 / static_fraction))) if static_fraction > 0 else 0
    clips = []
    for i in range(count):
        kind, background = combos[i % len(combos)]
        spec = random_spec(cfg, kind, background, rng)
        if period and i % period == 0:
            spec = MotionSpec(kind=spec.kind, size=spec.size, vx=0, vy=0,
                              texture_seed=spec.texture_seed,
                              background=spec.background, start=spec.start)
        clip, _ = gen_clip(spec, cfg)
        clips.append(clip)
    return clips


def save_dataset(clips, cfg, seed, directory):
    """Directory of VTNS clips plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, clip in enumerate(clips):
        fname = f"clip_{i:05d}.vtns"
        write_vtns(directory / fname, clip.pixels)
        entries.append({"file": fname, "cond": clip.cond, "spec": clip.spec.to_dict()})
    manifest = {"config": cfg.to_dict(), "seed": seed, "clips": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    clips = []
    for entry in manifest["clips"]:
        pixels = read_vtns(directory / entry["file"]).astype(np.float32)
        clips.append(VideoClip(pixels=pixels, spec=MotionSpec.from_dict(entry["spec"]),
                               cond=entry["cond"]))
    return clips, manifest


def dump_clip_frames(clip_pixels, directory, prefix="frame"):
    """PGM dump of every frame's first channel, for eyeballing."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in range(clip_pixels.shape[0]):
        write_pgm(directory / f"{prefix}_{f:03d}.pgm", clip_pixels[f, 0])


class TrainingDiverged(RuntimeError):
    """Training loss went non-finite; the last good params were restored."""


def eps_mse(model, clips, params=None, seed=123):
    """Mean noise-prediction MSE over clips at seeded (t, noise) draws."""
    rng = rng_stream(seed, STREAM_TRAIN_NOISE)
    cfg = model.config
    pos = model.base_pos()
    total = 0.0
    for clip in clips:
        t = int(rng.integers(1, cfg.steps + 1))
        noise = rng.standard_normal(cfg.latent_shape()).astype(model.dtype)
        z_t = add_noise(clip.pixels.astype(model.dtype), t, noise, model.schedule)
        eps = model.forward(Tensor(z_t), t, clip.cond, pos, params=params).eps
        total += float(np.mean((eps.data - noise) ** 2))
    return total / len(clips)


def train_toy_dit(clips, cfg, epochs=3, lr=3e-4, batch_size=8, seed=0,
                  holdout_fraction=0.05, weight_decay=0.3, lr_decay_after=2,
                  calibration_clips=16, log=None):
    """Fit the toy transformer with the eps-prediction objective.

    Query/key projections start from activation statistics
    (calibrate_attention_init), weight matrices get decoupled weight decay,
    and the learning rate drops 3x after `lr_decay_after` epochs; together
    these keep the head-averaged attention a clean content matcher, which
    extraction depends on. Deterministic given the seed: batch order,
    timestep and noise draws all come from per-consumer streams. Returns
    (model, history); history rows are (epoch, train_mse, holdout_mse). A
    non-finite batch loss restores the last epoch-end params and raises
    TrainingDiverged.
    """
    if not clips:
        raise ValueError("dataset is empty")
    n_hold = max(1, int(len(clips) * holdout_fraction)) if len(clips) > 4 else 0
    holdout, train = clips[:n_hold], clips[n_hold:]

    model = DiTModel.init_random(cfg, seed=seed)
    if calibration_clips:
        calib = train[:calibration_clips]
        calibrate_attention_init(model, [c.pixels for c in calib], [c.cond for c in calib])
    params = model.param_tensors(requires_grad=True)
    adams = {name: Adam(p.shape, dtype=model.dtype) for name, p in params.items()}
    decayed = {name for name in params if ".w" in name or name in ("patch_w", "head_w")}
    order_rng = rng_stream(seed, STREAM_TRAIN_ORDER)
    noise_rng = rng_stream(seed, STREAM_TRAIN_NOISE)
    pos = model.base_pos()
    last_good = {k: v.copy() for k, v in model.params.items()}

    history = []
    for epoch in range(epochs):
        epoch_lr = lr if epoch < lr_decay_after else lr / 3.0
        order = order_rng.permutation(len(train))
        epoch_loss, seen = 0.0, 0
        for lo in range(0, len(order), batch_size):
            batch = order[lo:lo + batch_size]
            grads = {name: np.zeros_like(p.data) for name, p in params.items()}
            batch_loss = 0.0
            for idx in batch:
                clip = train[int(idx)]
                t = int(noise_rng.integers(1, cfg.steps + 1))
                noise = noise_rng.standard_normal(cfg.latent_shape()).astype(model.dtype)
                z_t = add_noise(clip.pixels, t, noise, model.schedule)
                with Tape() as tape:
                    eps = model.forward(Tensor(z_t), t, clip.cond, pos, params=params).eps
                    diff = T.sub(eps, Tensor(noise))
                    loss = T.scale(T.sum_squares(diff), 1.0 / noise.size)
                    tape.backward(loss)
                batch_loss += float(loss.data)
                for name, p in params.items():
                    grads[name] += p.grad
            if not np.isfinite(batch_loss):
                for name in model.params:
                    model.params[name][...] = last_good[name]
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            inv = 1.0 / len(batch)
            for name, p in params.items():
                if name in decayed and weight_decay:
                    p.data *= model.dtype.type(1.0 - epoch_lr * weight_decay)
                adams[name].update(p.data, grads[name] * inv, epoch_lr)
            epoch_loss += batch_loss
            seen += len(batch)
        train_mse = epoch_loss / max(seen, 1)
        holdout_mse = eps_mse(model, holdout, params=params) if holdout else float("nan")
        history.append({"epoch": epoch, "train_mse": train_mse, "holdout_mse": holdout_mse})
        if log:
            log(f"epoch {epoch}: train_mse={train_mse:.4f} holdout_mse={holdout_mse:.4f}")
        last_good = {k: v.copy() for k, v in model.params.items()}
    return model, history
