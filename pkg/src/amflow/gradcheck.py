"""Finite-difference verification suites for every gradient path.

Three tiers, all double precision: (a) each primitive op against central
differences, (b) the motion-flow loss with respect to captured queries and
keys, (c) the motion-flow loss with respect to the noisy latent and the
positional delta through a small two-block model. Thresholds follow the
tiers: 1e-5, 1e-4, 1e-3.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .flow import flow_from_capture, amf_loss
from .guidance import GuidanceConfig
from .model import DiTModel, ModelConfig
from .tensor import Tensor, finite_diff_check

OP_TOL = 1e-5
LOSS_TOL = 1e-4
MODEL_TOL = 1e-3

TINY_CONFIG = ModelConfig(frames=2, channels=1, height=4, width=4, patch=2,
                          dim=8, heads=2, depth=2, steps=10, cond_vocab=2)


def op_check_cases(rng):
    """(name, fn, point) triples: one scalar-valued wrapper per primitive op."""
    a34 = rng.standard_normal((3, 4))
    b45 = rng.standard_normal((4, 5))
    m34 = rng.standard_normal((3, 4))
    w5 = rng.standard_normal(5)
    gamma = rng.standard_normal(4) * 0.5 + 1.0
    beta = rng.standard_normal(4) * 0.1
    b232 = rng.standard_normal((2, 3, 2))
    idx = [2, 0, 2]

    def wrap(op):
        return lambda x: T.sum_squares(op(x))

    return [
        ("matmul_lhs", wrap(lambda x: T.matmul(x, Tensor(b45))), a34),
        ("matmul_rhs", wrap(lambda x: T.matmul(Tensor(a34), x)), b45),
        ("matmul_batched", wrap(lambda x: T.matmul(x, Tensor(b232))),
         rng.standard_normal((2, 4, 3))),
        ("transpose", wrap(T.transpose), a34),
        ("permute", wrap(lambda x: T.permute(x, (2, 0, 1))), rng.standard_normal((2, 3, 4))),
        ("reshape", wrap(lambda x: T.reshape(x, (2, 6))), a34),
        ("add", wrap(lambda x: T.add(x, Tensor(m34))), a34),
        ("add_broadcast", wrap(lambda x: T.add(Tensor(a34), x)), rng.standard_normal(4)),
        ("sub", wrap(lambda x: T.sub(x, Tensor(m34))), a34),
        ("mul", wrap(lambda x: T.mul(x, Tensor(m34))), a34),
        ("scale", wrap(lambda x: T.scale(x, -1.7)), a34),
        ("softmax_t1", wrap(lambda x: T.mul(T.softmax(x), Tensor(w5))), rng.standard_normal(5)),
        ("softmax_t2", wrap(lambda x: T.mul(T.softmax(x, temperature=2.0), Tensor(w5))),
         rng.standard_normal((3, 5))),
        ("layer_norm_x", wrap(lambda x: T.layer_norm(x, Tensor(gamma), Tensor(beta))), a34),
        ("layer_norm_gamma", wrap(lambda g: T.layer_norm(Tensor(a34), g, Tensor(beta))), gamma),
        ("layer_norm_beta", wrap(lambda b: T.layer_norm(Tensor(a34), Tensor(gamma), b)), beta),
        ("gelu", wrap(T.gelu), a34),
        ("gather_rows", wrap(lambda x: T.gather_rows(x, idx)), a34),
        ("mean_axis", wrap(lambda x: T.mean_axis(x, 0)), a34),
        ("sum_squares", lambda x: T.sum_squares(x), a34),
    ]


def check_ops(instances=50, seed=0):
    """Worst relative FD error per op over `instances` random draws."""
    worst = {}
    for i in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        for name, fn, point in op_check_cases(rng):
            err = finite_diff_check(fn, Tensor(np.asarray(point, dtype=np.float64)), 1e-5)
            worst[name] = max(worst.get(name, 0.0), err)
    return [(f"op:{name}", err, err < OP_TOL) for name, err in sorted(worst.items())]


def _toy_reference_flow(rng, cfg, tau):
    q = rng.standard_normal((cfg.frames, cfg.tokens_per_frame, cfg.head_dim))
    k = rng.standard_normal((cfg.frames, cfg.tokens_per_frame, cfg.head_dim))
    return flow_from_capture(q, k, tau, cfg.grid_h, cfg.grid_w, mode="hard")


def check_loss_wrt_qk(seed=0, tau=2.0):
    """Loss gradient through soft flows, w.r.t. stacked Q and K captures."""
    cfg = TINY_CONFIG
    rng = np.random.default_rng(seed)
    ref = _toy_reference_flow(rng, cfg, tau)
    f, s, dh = cfg.frames, cfg.tokens_per_frame, cfg.head_dim

    def fn(stacked):
        q = T.reshape(T.gather_rows(T.reshape(stacked, (2, f * s * dh)), [0]), (f, s, dh))
        k = T.reshape(T.gather_rows(T.reshape(stacked, (2, f * s * dh)), [1]), (f, s, dh))
        soft = flow_from_capture(q, k, tau, cfg.grid_h, cfg.grid_w, mode="soft")
        return amf_loss(ref, soft)

    point = rng.standard_normal((2, f, s, dh))
    err = finite_diff_check(fn, Tensor(point), 1e-6)
    return [("loss:d_qk", err, err < LOSS_TOL)]


def _tiny_model(seed=0):
    return DiTModel.init_random(TINY_CONFIG, seed=seed, dtype=np.float64)


def check_loss_through_model(seed=0, tau=2.0, block=1):
    """End-to-end loss gradients w.r.t. the latent and the positional delta."""
    cfg = TINY_CONFIG
    model = _tiny_model(seed)
    rng = np.random.default_rng(seed + 1)
    ref = _toy_reference_flow(rng, cfg, tau)
    gcfg = GuidanceConfig(block=block, tau=tau)
    z0 = rng.standard_normal(cfg.latent_shape())
    base = Tensor(model.posemb.base)

    def soft_loss(z, pos):
        res = model.forward(z, 5, 1, pos, capture_block=gcfg.block, stop_after=gcfg.block)
        soft = flow_from_capture(res.capture.q, res.capture.k, tau,
                                 cfg.grid_h, cfg.grid_w, mode="soft")
        return amf_loss(ref, soft)

    def fn_latent(z):
        return soft_loss(z, base)

    def fn_delta(delta):
        return soft_loss(Tensor(z0), T.add(base, delta))

    err_latent = finite_diff_check(fn_latent, Tensor(z0.copy()), 1e-6)
    err_delta = finite_diff_check(
        fn_delta, Tensor(np.zeros((cfg.seq_len, cfg.dim))), 1e-6)
    return [("model:d_latent", err_latent, err_latent < MODEL_TOL),
            ("model:d_posemb", err_delta, err_delta < MODEL_TOL)]


def run_gradient_suite(op_instances=50, verbose=False):
    """All three tiers; returns (name, max_rel_err, passed) rows."""
    results = []
    results += check_ops(instances=op_instances)
    results += check_loss_wrt_qk()
    results += check_loss_through_model()
    if verbose:
        for name, err, passed in results:
            print(f"{'PASS' if passed else 'FAIL'} {name}: {err:.3e}")
    return results
