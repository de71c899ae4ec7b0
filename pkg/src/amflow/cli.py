"""Command-line front end: every pipeline stage as a manifest-driven subcommand.

Each run writes its artifacts plus a manifest.json under the output
directory; `replay` re-executes any manifest and must reproduce the
artifacts byte for byte. Validation problems exit with code 2 and a
single-line `error: <reason>` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evalkit import build_report, displacement_agreement, write_report
from .flow import extract_reference_amf, load_motion_flow, nn_displacement, save_motion_flow
from .formats import read_vtns, write_vtns
from .guidance import (
    GuidanceConfig,
    capture_reference_kv,
    guided_generate,
    load_state_set,
    save_state_set,
    zero_shot_generate,
)
from .model import ModelConfig, load_checkpoint, sample_video, save_checkpoint
from .synth import dump_clip_frames, gen_dataset, load_dataset, save_dataset, train_toy_dit
from .tensor import finite_diff_check

OUT_ROOT_ENV = "AMFLOW_OUT_ROOT"


def _out_dir(path):
    path = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out, subcommand, args, outputs):
    recorded = {k: v for k, v in args.items() if k not in ("func", "subcommand")}
    manifest = {
        "tool": {"name": "amflow", "version": __version__},
        "subcommand": subcommand,
        "args": recorded,
        "outputs": sorted(outputs),
    }
    (Path(out) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_model(path):
    return load_checkpoint(path)


def _guidance_from_args(args, model):
    block = args.block if args.block is not None else model.config.depth // 2
    return GuidanceConfig(
        block=block,
        tau=args.tau,
        k_opt=args.kopt,
        t_opt_fraction=args.topt,
        lr_start=args.lr_start,
        lr_end=args.lr_end,
        target_mode=args.target,
        inject_kv=args.inject_kv,
        injection_block=args.injection_block,
        seed=args.seed,
    )


def _add_guidance_flags(sp, include_target=True):
    sp.add_argument("--block", type=int, default=None,
                    help="guidance block (default: mid-depth)")
    sp.add_argument("--tau", type=float, default=2.0)
    sp.add_argument("--kopt", type=int, default=5)
    sp.add_argument("--topt", type=float, default=0.2,
                    help="fraction of denoising steps guided, from t=T down")
    sp.add_argument("--lr-start", type=float, default=0.002, dest="lr_start")
    sp.add_argument("--lr-end", type=float, default=0.001, dest="lr_end")
    sp.add_argument("--inject-kv", action=argparse.BooleanOptionalAction, default=True,
                    dest="inject_kv")
    sp.add_argument("--injection-block", type=int, default=0, dest="injection_block")
    if include_target:
        sp.add_argument("--target", choices=["latent", "posemb"], default="latent")


def _loss_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "inner_step", "loss", "lr"])
        for row in trace:
            writer.writerow([row["t"], row["inner_step"],
                             repr(row["loss"]), repr(row["lr"])])


def cmd_gen_data(args):
    cfg = ModelConfig()
    clips = gen_dataset(args.count, args.seed, cfg)
    out = _out_dir(args.out)
    save_dataset(clips, cfg, args.seed, out)
    _write_manifest(out, "gen-data", vars(args),
                    ["manifest is the dataset manifest; clips are clip_*.vtns"])
    print(f"wrote {len(clips)} clips to {out}")
    return 0


def cmd_train(args):
    clips, manifest = load_dataset(args.data)
    cfg = ModelConfig(**manifest["config"])
    model, history = train_toy_dit(
        clips, cfg, epochs=args.epochs, lr=args.lr, batch_size=args.batch,
        seed=args.seed, log=print)
    out = _out_dir(args.out)
    save_checkpoint(model, out / "checkpoint")
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mse", "holdout_mse"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_mse"]), repr(row["holdout_mse"])])
    _write_manifest(out, "train", vars(args), ["checkpoint", "loss_curve.csv"])
    print(f"final train_mse={history[-1]['train_mse']:.4f}")
    return 0


def cmd_sample(args):
    model = _load_model(args.ckpt)
    video = sample_video(model, args.cond, args.seed)
    out = _out_dir(args.out)
    write_vtns(out / "video.vtns", video)
    dump_clip_frames(video, out / "frames")
    _write_manifest(out, "sample", vars(args), ["video.vtns", "frames/"])
    print(f"sampled video to {out / 'video.vtns'}")
    return 0


def cmd_extract_amf(args):
    model = _load_model(args.ckpt)
    clip = read_vtns(args.clip)
    gcfg = GuidanceConfig(
        block=args.block if args.block is not None else model.config.depth // 2,
        tau=args.tau)
    flow = extract_reference_amf(model, clip, gcfg)
    out = _out_dir(args.out)
    save_motion_flow(flow, out / "amf.vtns")
    outputs = ["amf.vtns", "amf.vtns.json"]
    if args.nn_baseline:
        save_motion_flow(nn_displacement(clip, model.config), out / "nn_flow.vtns")
        outputs += ["nn_flow.vtns", "nn_flow.vtns.json"]
    _write_manifest(out, "extract-amf", vars(args), outputs)
    print(f"wrote motion flow to {out / 'amf.vtns'}")
    return 0


def cmd_transfer(args):
    model = _load_model(args.ckpt)
    ref_clip = read_vtns(args.ref)
    gcfg = _guidance_from_args(args, model)
    ref_flow = extract_reference_amf(model, ref_clip, gcfg)
    kv = capture_reference_kv(model, ref_clip, gcfg.injection_block) if gcfg.inject_kv else None
    out = _out_dir(args.out)
    run = guided_generate(model, ref_flow, args.cond, gcfg, kv_cache=kv,
                          reference_id=str(args.ref), dump_dir=out / "diverged")
    write_vtns(out / "video.vtns", run.video)
    dump_clip_frames(run.video, out / "frames")
    _loss_trace_csv(out / "loss_trace.csv", run.loss_trace)
    outputs = ["video.vtns", "frames/", "loss_trace.csv"]
    if run.states is not None:
        save_state_set(run.states, out / "states")
        outputs.append("states/")
    _write_manifest(out, "transfer", vars(args), outputs)
    print(f"transfer complete: {out / 'video.vtns'}")
    return 0


def cmd_zero_shot(args):
    model = _load_model(args.ckpt)
    states = load_state_set(args.states)
    gcfg = _guidance_from_args(args, model)
    kv = None
    if gcfg.inject_kv:
        if not args.ref:
            raise ValueError("zero-shot with --inject-kv needs --ref for the KV capture")
        kv = capture_reference_kv(model, read_vtns(args.ref), gcfg.injection_block)
    video = zero_shot_generate(model, states, args.cond, gcfg, kv_cache=kv)
    out = _out_dir(args.out)
    write_vtns(out / "video.vtns", video)
    dump_clip_frames(video, out / "frames")
    _write_manifest(out, "zero-shot", vars(args), ["video.vtns", "frames/"])
    print(f"zero-shot video: {out / 'video.vtns'}")
    return 0


def cmd_eval(args):
    model = _load_model(args.ckpt)
    ref_clip = read_vtns(args.ref)
    videos = {}
    for item in args.video:
        if "=" not in item:
            raise ValueError(f"--video expects label=path, got {item!r}")
        label, path = item.split("=", 1)
        if not Path(path).exists():
            raise FileNotFoundError(f"missing video artifact: {path}")
        videos[label] = read_vtns(path)
    gcfg = GuidanceConfig(
        block=args.block if args.block is not None else model.config.depth // 2,
        tau=args.tau)
    trace = None
    if args.loss_trace:
        with open(args.loss_trace) as fh:
            trace = [{"loss": float(r["loss"])} for r in csv.DictReader(fh)]
    report = build_report(model, ref_clip, videos, gcfg, loss_trace=trace)
    out = _out_dir(args.out)
    write_report(report, out)
    _write_manifest(out, "eval", vars(args), ["report.json", "agreement.csv"])
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_grad_check(args):
    from .gradcheck import run_gradient_suite

    results = run_gradient_suite(verbose=True)
    worst = max(err for _, err, _ in results)
    ok = all(passed for _, _, passed in results)
    print(f"worst relative error: {worst:.3e}")
    if not ok:
        print("error: gradient suite failed", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args):
    model = _load_model(args.ckpt)
    ref_clip = read_vtns(args.ref)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValueError("--values is empty")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = _out_dir(args.out)
    rows = []
    for raw in values:
        gcfg = _guidance_from_args(args, model)
        if args.axis == "block":
            gcfg = GuidanceConfig(**{**gcfg.to_dict(), "block": int(raw)})
        elif args.axis == "kopt":
            gcfg = GuidanceConfig(**{**gcfg.to_dict(), "k_opt": int(raw)})
        else:
            gcfg = GuidanceConfig(**{**gcfg.to_dict(), "t_opt_fraction": float(raw)})
        ref_flow = extract_reference_amf(model, ref_clip, gcfg)
        kv = capture_reference_kv(model, ref_clip, gcfg.injection_block) if gcfg.inject_kv else None
        cosines = []
        for seed in seeds:
            run_cfg = GuidanceConfig(**{**gcfg.to_dict(), "seed": seed})
            run = guided_generate(model, ref_flow, args.cond, run_cfg, kv_cache=kv)
            gen_flow = extract_reference_amf(model, run.video, gcfg)
            cosines.append(displacement_agreement(gen_flow, ref_flow).cosine)
        rows.append({"axis": args.axis, "value": raw,
                     "mean_cosine": float(np.mean(cosines)),
                     "seeds": len(seeds)})
        print(f"{args.axis}={raw}: mean cosine {rows[-1]['mean_cosine']:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "mean_cosine", "seeds"])
        for row in rows:
            writer.writerow([row["axis"], row["value"], repr(row["mean_cosine"]), row["seeds"]])
    _write_manifest(out, "ablate", vars(args), ["ablation.csv"])
    return 0


def cmd_replay(args):
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    sub = manifest["subcommand"]
    recorded = dict(manifest["args"])
    recorded["out"] = args.out
    argv = [sub]
    for key, value in recorded.items():
        if key in ("func",):
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            argv.append(flag if value else "--no-" + flag.lstrip("-"))
        elif isinstance(value, list):
            for item in value:
                argv += [flag, str(item)]
        elif value is None:
            continue
        else:
            argv += [flag, str(value)]
    return main(argv)


def build_parser():
    parser = argparse.ArgumentParser(prog="amflow",
                                     description="Toy-scale motion transfer pipeline")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sp = sub.add_parser("gen-data", help="generate a synthetic clip dataset")
    sp.add_argument("--count", type=int, default=2048)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the toy denoiser")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=3)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="plain unguided sampling")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--cond", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("extract-amf", help="reference motion flow of a clip")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--block", type=int, default=None)
    sp.add_argument("--tau", type=float, default=2.0)
    sp.add_argument("--nn-baseline", action=argparse.BooleanOptionalAction, default=False,
                    dest="nn_baseline")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract_amf)

    sp = sub.add_parser("transfer", help="guided generation against a reference clip")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--cond", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    _add_guidance_flags(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("zero-shot", help="replay optimized states with a new condition")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--states", required=True)
    sp.add_argument("--ref", default=None, help="reference clip for KV injection")
    sp.add_argument("--cond", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    _add_guidance_flags(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_zero_shot)

    sp = sub.add_parser("eval", help="agreement/smoothness report for generated videos")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--video", action="append", default=[], help="label=path, repeatable")
    sp.add_argument("--block", type=int, default=None)
    sp.add_argument("--tau", type=float, default=2.0)
    sp.add_argument("--loss-trace", default=None, dest="loss_trace")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grad-check", help="finite-difference gradient suites")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("ablate", help="sweep one guidance axis, emit a CSV grid")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--cond", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--axis", choices=["block", "topt", "kopt"], required=True)
    sp.add_argument("--values", required=True, help="comma-separated axis values")
    sp.add_argument("--seeds", default="0", help="comma-separated seeds")
    _add_guidance_flags(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("replay", help="re-run a recorded manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_replay)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
