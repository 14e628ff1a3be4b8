"""Command-line entry points: dataset collection and augmentation, per-stage
training, keypoint/error-map emission, metrics, figures, and full pipeline
runs and sweeps."""

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    DistractorSpec,
    FrameDataset,
    apply_distractor,
    load_split,
    save_split,
)
from .lspn import LSPN, LSPNTrainConfig, compute_feature_stacks, \
    fused_error_maps, load_lspns, save_lspns, train_lspn
from .metrics import distractor_capture_rate, keypoint_coverage
from .pipeline import (
    _stage_evaluate,
    _stage_train_agent,
    collect_episode_stream,
    run_pipeline,
    run_sweep,
)
from .pointnet import KeypointPointNet, PointNetConfig, load_pointnet, \
    save_pointnet, train_pointnet
from .sprites import SpritesConfig, SpritesEnv
from .transporter import Transporter, TransporterConfig, save_transporter, \
    train_transporter
from .vae import SpatialVAE, VAEConfig, load_vae, save_vae, train_vae
from .viz import keypoint_figure


def _split_frames(data_dir, split):
    return load_split(data_dir, split).frames


def _train_val(data_dir):
    """Load train/val splits; carve a 10% validation tail from train when
    no val split was collected."""
    train = _split_frames(data_dir, "train")
    try:
        val = _split_frames(data_dir, "val")
    except FileNotFoundError:
        cut = max(1, len(train) // 10)
        train, val = train[:-cut], train[-cut:]
    return train, val


def cmd_collect(args):
    if not args.env.startswith("sprites"):
        raise SystemExit(f"unknown env {args.env!r}")
    if args.policy != "random":
        raise SystemExit("only the random collection policy is supported")
    env = SpritesEnv(SpritesConfig(distractor=args.distractor), seed=args.seed)
    frames, episodes = collect_episode_stream(
        env, args.n, np.random.default_rng(args.seed))
    save_split(FrameDataset(frames, split=args.split), args.out)
    with open(os.path.join(args.out, "episodes.json"), "w") as fh:
        json.dump({args.split: episodes}, fh)
    print(f"wrote {args.n} frames to {args.out}/{args.split}")


_AUGMENT_MODES = {"h": "horizontal", "v": "vertical", "both": "both"}


def cmd_augment(args):
    ds = load_split(args.data, args.split)
    spec = DistractorSpec(mode=_AUGMENT_MODES[args.mode])
    rng = np.random.default_rng(args.seed)
    frames = np.empty_like(ds.frames)
    masks = np.empty((len(ds.frames), 84, 84), dtype=bool)
    for i, frame in enumerate(ds.frames):
        frames[i], masks[i] = apply_distractor(frame, spec, rng)
    save_split(FrameDataset(frames, split=args.split), args.out)
    np.savez_compressed(os.path.join(args.out, "distractor_masks.npz"),
                        masks=masks)
    print(f"augmented {len(frames)} frames -> {args.out}/{args.split}")


def cmd_train_vae(args):
    train, val = _train_val(args.data)
    model = SpatialVAE(VAEConfig(epochs=args.epochs))
    train_vae(model, train, val, max_steps=args.max_steps, seed=args.seed)
    save_vae(model, args.out)
    print(f"saved VAE to {args.out}")


def _parse_layers(text):
    return tuple(int(v) for v in text.split(","))


def cmd_train_lspn(args):
    layers = _parse_layers(args.layers)
    vae = load_vae(args.vae)
    train, val = _train_val(args.data)
    cfg = LSPNTrainConfig(p=args.p, layers=layers)
    tr_feats = compute_feature_stacks(vae, train, layers)
    va_feats = compute_feature_stacks(vae, val, layers)
    nets = []
    for i, (tr, va) in enumerate(zip(tr_feats, va_feats)):
        net = LSPN(tr.shape[1], p=args.p)
        train_lspn(net, tr, va, cfg, max_steps=args.max_steps,
                   seed=args.seed + i)
        nets.append(net)
    save_lspns(nets, layers, args.p, args.out)
    print(f"saved {len(nets)} prediction networks to {args.out}")


def cmd_emit_error_maps(args):
    vae = load_vae(args.vae)
    nets, layers, _p = load_lspns(args.lspns)
    frames = _split_frames(args.data, args.split)
    maps = []
    with torch.no_grad():
        for i in range(0, len(frames), 64):
            feats = compute_feature_stacks(vae, frames[i:i + 64], layers)
            maps.append(fused_error_maps(feats, nets))
    os.makedirs(args.out, exist_ok=True)
    torch.save(torch.cat(maps), os.path.join(args.out, "maps.pt"))
    with open(os.path.join(args.out, "frames.json"), "w") as fh:
        json.dump({"split": args.split, "indices": list(range(len(frames)))},
                  fh)
    print(f"wrote fused maps for {len(frames)} frames to {args.out}")


def cmd_train_pointnet(args):
    maps = torch.load(os.path.join(args.maps, "maps.pt"), weights_only=True)
    cut = max(1, len(maps) // 10)
    model = KeypointPointNet(
        PointNetConfig(k=args.k, in_channels=maps.shape[1]))
    train_pointnet(model, maps[:-cut], maps[-cut:], max_steps=args.max_steps,
                   seed=args.seed)
    save_pointnet(model, args.out)
    print(f"saved keypoint network (K={args.k}) to {args.out}")


def cmd_train_transporter(args):
    train, val = _train_val(args.data)
    with open(os.path.join(args.data, "episodes.json")) as fh:
        episodes = json.load(fh)
    eps = episodes.get("train", next(iter(episodes.values())))
    val_eps = episodes.get("val", [[0, len(val)]])
    model = Transporter(TransporterConfig(k=args.k))
    train_transporter(model, train, eps, val, val_eps,
                      max_steps=args.max_steps, seed=args.seed)
    save_transporter(model, args.out)
    print(f"saved transporter (K={args.k}) to {args.out}")


def cmd_emit_keypoints(args):
    frames = _split_frames(args.frames, args.split)
    if args.pointnet:
        vae = load_vae(args.vae)
        nets, layers, _p = load_lspns(args.lspns)
        model = load_pointnet(args.pointnet)
        model.eval()
        centers, masks = [], []
        with torch.no_grad():
            for i in range(0, len(frames), 64):
                feats = compute_feature_stacks(vae, frames[i:i + 64], layers)
                maps = fused_error_maps(feats, nets)
                _r, c, m = model(maps)
                centers.append(c)
                masks.append(m)
    elif args.transporter:
        from .pointnet import gaussian_maps
        from .transporter import load_transporter

        model = load_transporter(args.transporter)
        model.eval()
        x = torch.from_numpy(frames).permute(0, 3, 1, 2)
        centers, masks = [], []
        with torch.no_grad():
            for i in range(0, len(frames), 64):
                c = model.keypoints(x[i:i + 64])
                centers.append(c)
                masks.append(gaussian_maps(c, model.config.sigma, (21, 21)))
    else:
        raise SystemExit(
            "emit-keypoints needs --pointnet (with --vae/--lspns) "
            "or --transporter")
    centers = torch.cat(centers).numpy()
    os.makedirs(args.out, exist_ok=True)
    records = [{"frame_id": i, "centers": centers[i].tolist()}
               for i in range(len(centers))]
    with open(os.path.join(args.out, "keypoints.json"), "w") as fh:
        json.dump(records, fh)
    torch.save(torch.cat(masks), os.path.join(args.out, "masks.pt"))
    print(f"wrote keypoints for {len(centers)} frames to {args.out}")


def cmd_train_agent(args):
    cfg = load_config(args.config)
    if args.steps:
        cfg.agent_steps = args.steps
    if args.encoder:
        cfg.encoder = args.encoder
    _stage_train_agent(cfg, args.run_dir)
    print(f"saved policies to {args.run_dir}/policies.pt")


def cmd_evaluate(args):
    cfg = load_config(args.config)
    report = _stage_evaluate(cfg, args.run_dir)
    print(json.dumps(report["score_summary"], indent=2))


def cmd_metrics(args):
    with open(os.path.join(args.kps, "keypoints.json")) as fh:
        records = json.load(fh)
    scenes = np.load(args.scenes)
    cover, capture = [], []
    for rec in records:
        i = rec["frame_id"]
        centers = np.asarray(rec["centers"])
        masks = [m for m in scenes["instance_masks"][i]]
        cover.append(keypoint_coverage(centers, args.sigma, masks))
        capture.append(distractor_capture_rate(
            centers, args.sigma, scenes["distractor_masks"][i]))
    report = {
        "coverage_mean": float(np.mean(cover)),
        "coverage_std": float(np.std(cover)),
        "capture_rate_mean": float(np.mean(capture)),
        "n_frames": len(records),
    }
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
    print(json.dumps(report, indent=2))


def cmd_figures(args):
    frames = _split_frames(args.frames, args.split)[:args.n]
    with open(os.path.join(args.kps, "keypoints.json")) as fh:
        records = json.load(fh)
    centers = [np.asarray(records[i]["centers"]) for i in range(len(frames))]
    errmaps = None
    if args.maps:
        errmaps = torch.load(os.path.join(args.maps, "maps.pt"),
                             weights_only=True)[:len(frames)].numpy()
    img = keypoint_figure([(f * 255).astype(np.uint8) for f in frames],
                          centers, errmaps)
    img.save(args.out)
    print(f"wrote figure to {args.out}")


def cmd_run(args):
    cfg = load_config(args.config)
    manifest = run_pipeline(cfg, args.out)
    hits = {n: s["cache_hit"] for n, s in manifest["stages"].items()}
    print(json.dumps({"stages": hits}, indent=2))


def _parse_vary(text):
    """'k=5,7,10' or 'layers=0|0,1|2,3' -> (field name, typed values)."""
    if "=" not in text:
        raise SystemExit("--vary expects key=v1,v2,...")
    key, _, raw = text.partition("=")
    schema = {f.name: f.type for f in fields(ExperimentConfig)}
    if key not in schema:
        raise SystemExit(f"unknown config field {key!r}")
    parts = raw.split("|") if "|" in raw else raw.split(",")
    kind = schema[key]
    if kind is tuple:
        values = [tuple(int(v) for v in part.split(",")) for part in parts]
    elif kind is bool:
        values = [part == "true" for part in parts]
    else:
        values = [kind(part) for part in parts]
    return key, values


def cmd_sweep(args):
    cfg = load_config(args.config)
    key, values = _parse_vary(args.vary)
    results = run_sweep(cfg, args.out, key, values)
    print(json.dumps(sorted(results), indent=2))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="permakey",
        description="Object keypoints from local predictability errors: "
                    "dataset tools, module training, metrics, and "
                    "pipeline orchestration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="record random-policy frames")
    p.add_argument("--env", default="sprites")
    p.add_argument("--policy", default="random")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distractor", action="store_true")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("augment", help="overlay a moving-bar distractor")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--mode", choices=sorted(_AUGMENT_MODES), default="h")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-vae")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-lspn")
    p.add_argument("--vae", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layers", default="0,1")
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_lspn)

    p = sub.add_parser("emit-error-maps")
    p.add_argument("--vae", required=True)
    p.add_argument("--lspns", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_error_maps)

    p = sub.add_parser("train-pointnet")
    p.add_argument("--maps", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_pointnet)

    p = sub.add_parser("train-transporter")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_transporter)

    p = sub.add_parser("emit-keypoints")
    p.add_argument("--frames", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--vae")
    p.add_argument("--lspns")
    p.add_argument("--pointnet")
    p.add_argument("--transporter")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_keypoints)

    p = sub.add_parser("train-agent")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--encoder", choices=("cnn", "gnn"))
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_agent)

    p = sub.add_parser("evaluate")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("metrics")
    p.add_argument("--kps", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("figures")
    p.add_argument("--frames", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--kps", required=True)
    p.add_argument("--maps")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_figures)

    p = sub.add_parser("run", help="run the full pipeline from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="one pipeline run per swept value")
    p.add_argument("--config", required=True)
    p.add_argument("--vary", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
