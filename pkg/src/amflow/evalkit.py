"""Motion-transfer metrics: flow agreement, flow smoothness, report bundles.

Agreement compares two flows entry by entry (per-patch 2-vectors, averaged
cosine), judged where the comparison flow actually moves; total variation
quantifies flow smoothness for the model-vs-nearest-neighbor comparison.
Everything here is recomputable by the brute-force twins in the test suite.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .flow import MotionFlow, extract_reference_amf, nn_displacement
from .synth import FlowField

REPORT_SCHEMA = "evalkit/1"

MASK_POLICIES = ("reference-nonzero", "union-nonzero", "mask-valid", "all")


@dataclass
class AgreementReport:
    cosine: float
    endpoint_error: float
    exact_fraction: float
    within_one: float
    count: int
    policy: str

    def to_dict(self):
        return asdict(self)


def _dense(flow):
    """(F, F, S, 2) values plus an optional (F, S) validity mask."""
    if isinstance(flow, FlowField):
        return flow.delta, flow.mask
    if isinstance(flow, MotionFlow):
        return flow.values_array().astype(np.float64), None
    raise TypeError(f"expected MotionFlow or FlowField, got {type(flow)}")


def displacement_agreement(a, b, policy="reference-nonzero"):
    """Agreement of flow `a` against comparison flow `b`.

    The policy picks the evaluated entries; within them, cosine is averaged
    over entries where `b` is nonzero (zero-vs-zero counts as an exact
    match but has no direction to compare), endpoint error and the exact
    fraction cover the whole evaluated set.
    """
    if policy not in MASK_POLICIES:
        raise ValueError(f"unknown mask policy {policy!r}")
    va, mask_a = _dense(a)
    vb, mask_b = _dense(b)
    if va.shape != vb.shape:
        raise ValueError(f"flow geometry mismatch: {va.shape} vs {vb.shape}")

    frames = va.shape[0]
    nz_a = np.any(va != 0, axis=-1)
    nz_b = np.any(vb != 0, axis=-1)
    if policy == "reference-nonzero":
        valid = nz_b.copy()
    elif policy == "union-nonzero":
        valid = nz_a | nz_b
    elif policy == "mask-valid":
        if mask_a is None and mask_b is None:
            raise ValueError("mask-valid policy needs a FlowField input")
        valid = np.ones(va.shape[:3], dtype=bool)
    else:
        valid = np.ones(va.shape[:3], dtype=bool)
    for mask, _ in ((mask_a, a), (mask_b, b)):
        if mask is not None:
            valid &= mask[:, None, :].repeat(frames, axis=1)

    count = int(valid.sum())
    if count == 0:
        return AgreementReport(cosine=0.0, endpoint_error=0.0, exact_fraction=0.0,
                               within_one=0.0, count=0, policy=policy)

    diff = va - vb
    epe = float(np.sqrt(np.sum(diff * diff, axis=-1))[valid].mean())
    exact = float(np.all(va == vb, axis=-1)[valid].mean())
    within = float((np.abs(diff).max(axis=-1) <= 1.0)[valid].mean())

    cos_entries = valid & nz_b
    if cos_entries.any():
        na = np.sqrt(np.sum(va * va, axis=-1))
        nb = np.sqrt(np.sum(vb * vb, axis=-1))
        dot = np.sum(va * vb, axis=-1)
        denom = np.where(na * nb > 0, na * nb, 1.0)
        cos = np.where(na > 0, dot / denom, 0.0)  # a zero vs b moving: no agreement
        cosine = float(cos[cos_entries].mean())
    else:
        cosine = 0.0
    return AgreementReport(cosine=cosine, endpoint_error=epe, exact_fraction=exact,
                           within_one=within, count=count, policy=policy)


def total_variation(flow):
    """Sum over frame pairs of L1 differences across 4-neighbor patch edges.

    Each undirected grid edge counts once; adding a constant vector to a
    whole pair changes nothing.
    """
    values, _ = _dense(flow)
    frames = values.shape[0]
    gh = flow.grid_h
    gw = flow.grid_w
    total = 0.0
    for i in range(frames):
        for j in range(frames):
            grid = values[i, j].reshape(gh, gw, 2)
            total += float(np.abs(grid[1:, :] - grid[:-1, :]).sum())
            total += float(np.abs(grid[:, 1:] - grid[:, :-1]).sum())
    return total


def evaluate_videos(model, ref_flow, videos, guidance_cfg, ground_truth=None,
                    policy="reference-nonzero"):
    """Agreement of each generated video's extracted flow against the reference.

    videos: label -> pixel array. Flows are extracted with the same model,
    block and temperature as the reference. Adds a latent nearest-neighbor
    baseline row and, when ground truth is given, agreement against it.
    """
    rows = {}
    for label, video in sorted(videos.items()):
        flow = extract_reference_amf(model, video, guidance_cfg)
        entry = {
            "vs_reference": displacement_agreement(flow, ref_flow, policy).to_dict(),
            "total_variation": total_variation(flow),
        }
        if ground_truth is not None:
            entry["vs_ground_truth"] = displacement_agreement(
                flow, ground_truth, "mask-valid").to_dict()
        rows[label] = entry
    return rows


def build_report(model, ref_clip, videos, guidance_cfg, ground_truth=None,
                 loss_trace=None, policy="reference-nonzero"):
    """Consolidated JSON-ready bundle; deterministic except generated_at."""
    ref_flow = extract_reference_amf(model, ref_clip, guidance_cfg)
    nn_flow = nn_displacement(ref_clip, model.config)
    report = {
        "schema": REPORT_SCHEMA,
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "policy": policy,
        "guidance": guidance_cfg.to_dict(),
        "reference": {
            "flow_total_variation": total_variation(ref_flow),
            "nn_total_variation": total_variation(nn_flow),
            "nn_vs_reference": displacement_agreement(nn_flow, ref_flow, policy).to_dict(),
        },
        "videos": evaluate_videos(model, ref_flow, videos, guidance_cfg,
                                  ground_truth=ground_truth, policy=policy),
    }
    if ground_truth is not None:
        report["reference"]["amf_vs_ground_truth"] = displacement_agreement(
            ref_flow, ground_truth, "mask-valid").to_dict()
        report["reference"]["nn_vs_ground_truth"] = displacement_agreement(
            nn_flow, ground_truth, "mask-valid").to_dict()
    if loss_trace is not None:
        losses = [row["loss"] for row in loss_trace]
        report["loss_trace"] = {
            "entries": len(losses),
            "first": losses[0] if losses else None,
            "last": losses[-1] if losses else None,
        }
    return report


def write_report(report, directory):
    """report.json plus agreement.csv (label, cosine, epe, exact, count)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(directory / "agreement.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "cosine", "endpoint_error", "exact_fraction", "count"])
        for label, entry in sorted(report["videos"].items()):
            row = entry["vs_reference"]
            writer.writerow([label, row["cosine"], row["endpoint_error"],
                             row["exact_fraction"], row["count"]])
    return directory / "report.json"
