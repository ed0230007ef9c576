"""Command-line harness: train, eval, viz and gen-toy subcommands."""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

import torch
from PIL import Image

from . import evalkit
from .config import FullConfig, config_hash, load_config, load_preset, list_presets
from .hierarchy import forward_features, forward_flow, load_checkpoint
from .stream import open_stream, spec_from_items
from .trainer import run


def _load_config_arg(path: str) -> FullConfig:
    if path.startswith("preset:"):
        return load_preset(path.split(":", 1)[1])
    return load_config(path)


def _segments(cfg: FullConfig, stream_len: int) -> tuple[range, range]:
    """(template segment, evaluation segment) derived from the lap structure."""
    spec = cfg.stream
    n_obj = max(len(spec.objects), 1)
    lap = spec.frames_per_lap
    eval_frames = cfg.eval.eval_laps * n_obj * lap
    template_frames = cfg.eval.template_laps * n_obj * lap
    eval_start = stream_len - eval_frames
    template_start = eval_start - template_frames
    if template_start < 0:
        raise ValueError("stream too short for the configured template/eval laps")
    return range(template_start, eval_start), range(eval_start, stream_len)


def build_template_memory(cfg: FullConfig, state, stream):
    template_range, _ = _segments(cfg, len(stream))
    points = evalkit.default_supervision_points(
        stream, template_range.start, template_range.stop,
        cfg.eval.templates_per_object, cfg.eval.template_spacing)
    return evalkit.collect_templates(state, stream, points)


def cmd_train(args) -> int:
    cfg = _load_config_arg(args.config)
    if args.seed is not None:
        cfg.trainer.seed = args.seed
    if cfg.trainer.checkpoint_dir is None:
        cfg.trainer.checkpoint_dir = str(Path(args.config).with_suffix("")) + "_ckpt" \
            if not args.config.startswith("preset:") else "checkpoints"
    state, metrics = run(cfg, resume_from=args.resume)
    final = metrics[-1] if metrics else {}
    print(f"trained {state.step} steps; final loss {final.get('loss', float('nan')):.4f}; "
          f"checkpoints in {cfg.trainer.checkpoint_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config_arg(args.config)
    state, _ = load_checkpoint(args.ckpt, config_hash(cfg))
    stream = open_stream(cfg.stream)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    memory = build_template_memory(cfg, state, stream)
    _, eval_range = _segments(cfg, len(stream))
    report = evalkit.evaluate_lap(state, stream, eval_range, memory, cfg.eval.tau_abstain)

    with open(out / "metrics.txt", "w") as fh:
        for rec in report.per_frame:
            fh.write(json.dumps({"record": "frame", **rec}) + "\n")
        aggregate = {
            "record": "aggregate",
            "macro_f1": report.macro_f1,
            "mean_epe": report.mean_epe,
            "n_frames": report.n_frames,
            "n_pixels": report.n_pixels,
            "per_class": {str(c): vars(m) for c, m in report.per_class.items()},
        }
        fh.write(json.dumps(aggregate) + "\n")
    print(f"macro F1 = {report.macro_f1:.4f} over {report.n_frames} frames"
          + (f", mean EPE = {report.mean_epe:.3f}px" if report.mean_epe is not None else ""))

    if args.render:
        for t in eval_range:
            frame = stream.frame(t)
            maps = [m.cpu().numpy() for m in evalkit.extract_features(state, frame)]
            pred = evalkit.classify_map(maps, memory, cfg.eval.tau_abstain)
            img = evalkit.render_prediction(pred, frame)
            Image.fromarray(img).save(out / f"pred_{t:06d}.png")
    return 0


def cmd_viz(args) -> int:
    payload = torch.load(args.ckpt, map_location="cpu", weights_only=False)
    state, _ = load_checkpoint(args.ckpt, payload["config_hash"])

    parser = configparser.ConfigParser()
    if not parser.read(args.stream):
        raise FileNotFoundError(args.stream)
    spec = spec_from_items(dict(parser.items("stream")))
    stream = open_stream(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    count = min(args.frames, len(stream) - 1)
    stride = max((len(stream) - 1) // max(count, 1), 1)
    for i in range(count):
        t = 1 + i * stride
        if t >= len(stream):
            break
        prev, cur = stream.frame(t - 1), stream.frame(t)
        feats_prev = torch.from_numpy(prev.pixels).to(state.dtype)
        feats_cur = torch.from_numpy(cur.pixels).to(state.dtype)
        with torch.no_grad():
            for level, lv in enumerate(state.levels, start=1):
                flow = forward_flow(feats_prev, feats_cur, lv.flow)
                Image.fromarray(evalkit.render_flow(flow.numpy())).save(
                    out / f"flow_l{level}_{t:06d}.png")
                feats_prev = forward_features(feats_prev, lv.feat_ema)
                feats_cur = forward_features(feats_cur, lv.feat_ema)
                Image.fromarray(evalkit.render_features(feats_cur.numpy())).save(
                    out / f"features_l{level}_{t:06d}.png")
    print(f"wrote {len(list(out.glob('*.png')))} images to {out}")
    return 0


def cmd_gen_toy(args) -> int:
    parser = configparser.ConfigParser()
    if not parser.read(args.spec):
        raise FileNotFoundError(args.spec)
    spec = spec_from_items(dict(parser.items("stream")))
    from .stream import generate_toy_stream
    summary = generate_toy_stream(spec, args.out)
    print(json.dumps(summary))
    return 0


def cmd_presets(args) -> int:
    for name in list_presets():
        print(name)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="flowfeat")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train online on the configured stream")
    p.add_argument("--config", required=True, help="config file or preset:<name>")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="template collection + open-set evaluation")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render", action="store_true", help="also write prediction overlays")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render flow and feature images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stream", required=True, help="file with a [stream] section")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("gen-toy", help="write a synthetic stream with ground truth")
    p.add_argument("--spec", required=True, help="file with a [stream] section")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("presets", help="list shipped configuration presets")
    p.set_defaults(func=cmd_presets)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
