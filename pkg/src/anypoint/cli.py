"""Command-line entry point: ``anypoint {generate,train,track,eval,gradcheck,render}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from anypoint.config import CCA_MODES, REBASE_MODES, load_config
from anypoint.errors import ConfigError, GradCheckError, InvalidInputError, InvalidStateError, TrackFileError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("anypoint")


def _common(parser):
    parser.add_argument("--config", help="TOML config file ([model], [train], [world], [track] tables)")
    parser.add_argument("--seed", type=int, help="overrides train.seed and world.seed")
    parser.add_argument("--dump-attn", action="store_true", help="write per-frame attention diagnostics")
    parser.add_argument("--diag-dir", help="directory for --dump-attn output (default ./diag)")
    parser.add_argument("--no-vlta-visibility", action="store_true",
                        help="ablation: temporal attention ignores past visibility")
    parser.add_argument("--window", type=int, metavar="SIZE",
                        help="ablation: initialize every frame of a SIZE-frame window from the previous window")
    parser.add_argument("--no-invisible-mask", action="store_true",
                        help="ablation: supervise positions of occluded points too")
    parser.add_argument("--cca-mode", choices=CCA_MODES)
    parser.add_argument("--memory-cap", type=int, metavar="K", help="keep only the last K memory entries")
    parser.add_argument("--rebase", choices=REBASE_MODES)
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="anypoint", description="Online any-point tracking on synthetic video.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("generate", help="render synthetic sequences with ground truth")
    _common(p)
    p.add_argument("--out", required=True, help="output directory; one sub-directory per sequence")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--cut-probability", type=float)

    p = sub.add_parser("train", help="train a model (stage 1, optionally stage 2)")
    _common(p)
    p.add_argument("--data", help="directory of generated sequences (default: generate from [world])")
    p.add_argument("--count", type=int, default=8, help="sequences to generate when --data is absent")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--curve", help="loss-curve CSV path")
    p.add_argument("--iterations", type=int)
    p.add_argument("--stage2", action="store_true", help="then train the global-match fusion on cut frames")
    p.add_argument("--init", help="start from this checkpoint")

    p = sub.add_parser("track", help="track query points through a video")
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint (.npz)")
    p.add_argument("--video", required=True, help="directory of PNG frames (or a sequence directory)")
    p.add_argument("--points", required=True, help="query file, one 'x y start_frame' per line")
    p.add_argument("--out", default="tracks.txt")
    p.add_argument("--events", help="append scene-cut events to this JSONL file")

    p = sub.add_parser("eval", help="score a track file against ground truth")
    _common(p)
    p.add_argument("--tracks", required=True)
    p.add_argument("--gt", required=True, help="gt.json written by 'generate'")
    p.add_argument("--report", help="write the metric report as JSON")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradient paths")
    _common(p)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=8, help="coordinates per sub-network")

    p = sub.add_parser("render", help="draw tracks onto frames")
    _common(p)
    p.add_argument("--video", required=True)
    p.add_argument("--tracks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=4)
    return parser


def resolve_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.world.seed = args.seed
    if args.no_vlta_visibility:
        cfg.model.vlta_visibility = False
    if args.no_invisible_mask:
        cfg.train.invisible_mask = False
    if args.cca_mode:
        cfg.model.cca_mode = args.cca_mode
    if args.memory_cap is not None:
        cfg.model.memory_cap = args.memory_cap
    if args.window is not None:
        cfg.track.window = args.window
    if args.rebase:
        cfg.track.rebase = args.rebase
    if args.dump_attn:
        cfg.track.dump_attn = True
    if args.diag_dir:
        cfg.track.diag_dir = args.diag_dir
    if getattr(args, "cut_probability", None) is not None:
        cfg.world.cut_probability = args.cut_probability
    if getattr(args, "events", None):
        cfg.track.events_path = args.events
    if getattr(args, "iterations", None) is not None:
        cfg.train.iterations = args.iterations
    return cfg.validate()


def read_points(path):
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise InvalidInputError(f"{path}:{lineno}: expected 'x y start_frame'")
        try:
            x, y, s = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise InvalidInputError(f"{path}:{lineno}: malformed query line") from None
        if s < 0:
            raise InvalidInputError(f"{path}:{lineno}: negative start frame")
        rows.append((x, y, s))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _load_model(cfg, checkpoint):
    from anypoint.model import TrackerModel, load_checkpoint
    if checkpoint:
        model, meta = load_checkpoint(checkpoint)
        return model
    log.warning("no checkpoint given; tracking with an untrained model")
    torch.manual_seed(cfg.train.seed)
    return TrackerModel(cfg.model)


def cmd_generate(args, cfg):
    from anypoint.synthworld import generate_corpus, save_sequence
    out = Path(args.out)
    for i, seq in enumerate(generate_corpus(cfg.world, args.count)):
        save_sequence(seq, out / f"seq_{i:05d}")
    print(f"wrote {args.count} sequences to {out}")
    return EXIT_OK


def _corpus(args, cfg):
    from anypoint.synthworld import generate_corpus, load_sequence
    if args.data:
        dirs = sorted(p for p in Path(args.data).iterdir() if (p / "gt.json").exists())
        if not dirs:
            raise InvalidInputError(f"no sequences (gt.json) under {args.data}")
        return [load_sequence(d) for d in dirs]
    return generate_corpus(cfg.world, args.count)


def cmd_train(args, cfg):
    from anypoint.model import TrackerModel, load_checkpoint, save_checkpoint
    from anypoint.training import train_stage1, train_stage2
    corpus = _corpus(args, cfg)
    torch.manual_seed(cfg.train.seed)
    model = load_checkpoint(args.init)[0] if args.init else TrackerModel(cfg.model)
    reports = train_stage1(model, corpus, cfg.train, curve_path=args.curve, window=cfg.track.window)
    if args.stage2:
        curve2 = str(Path(args.curve).with_suffix(".stage2.csv")) if args.curve else None
        train_stage2(model, corpus, cfg.train, curve_path=curve2)
    save_checkpoint(model, args.out, extra={"config": cfg.to_dict()})
    last = reports[-1] if reports else None
    if last is not None:
        print(f"loc={last.location_loss:.4f} vis={last.visibility_loss:.4f} total={last.total:.4f}")
    print(f"saved {args.out}")
    return EXIT_OK


def cmd_track(args, cfg):
    from anypoint.synthworld import load_frames
    from anypoint.tracker import open_session, save_tracks, track_video
    frames = load_frames(args.video)
    queries = read_points(args.points)
    session = open_session(cfg.track, _load_model(cfg, args.checkpoint))
    records = track_video(session, frames, queries)
    save_tracks(records, args.out)
    print(f"wrote {len(records)} records to {args.out} ({len(session.events)} scene cuts)")
    return EXIT_OK


def cmd_eval(args, cfg):
    from anypoint.metrics import compute_metrics
    from anypoint.synthworld import load_ground_truth
    from anypoint.tracker import load_tracks, records_to_arrays
    gt, traj, vis = load_ground_truth(args.gt)
    P, T = vis.shape
    records = load_tracks(args.tracks)
    pos, alpha, _ = records_to_arrays(records, P, T)
    starts = np.asarray(gt.get("query_frames", [0] * P))
    valid = np.arange(T)[None, :] >= starts[:, None]
    h, w = gt["frame_size"]
    report = compute_metrics(pos, alpha, traj, vis, valid, frame_size=(w, h))
    print(f"AJ={report.AJ:.1f} delta_avg={report.delta_avg:.1f} OA={report.OA:.1f}")
    if args.report:
        Path(args.report).write_text(json.dumps({**report.to_dict(), "config": cfg.to_dict()}, indent=2))
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from anypoint.gradcheck import grad_check
    seed = cfg.train.seed
    report = grad_check(eps=args.eps, tol=args.tol, per_group=args.samples, seed=seed)
    print(report.summary())
    report.raise_for_failure()
    return EXIT_OK


def cmd_render(args, cfg):
    from anypoint.render import render_overlay
    from anypoint.synthworld import load_frames
    from anypoint.tracker import load_tracks
    paths = render_overlay(load_frames(args.video), load_tracks(args.tracks), args.out, scale=args.scale)
    print(f"wrote {len(paths)} frames to {args.out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "render": cmd_render}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GradCheckError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (InvalidInputError, InvalidStateError, TrackFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
