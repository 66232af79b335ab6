"""Command-line entry points.

Commands: gen-data, train, track-points, eval-points, track-objects, selftest.
Every source of randomness is derived from an explicit --seed flag (or the
seed inside the training config); identical invocations produce byte-identical
outputs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import formats as F
from . import tensor as T
from .assoc import AssocConfig, LbmPointPredictor, ReplayPredictor, track_objects
from .formats import FormatError
from .supervision import metrics
from .synth import SceneSpec, generate_clip
from .train import TrainConfig, run_training, track_clip

METRIC_ORDER = ["aj", "delta_avg", "delta_1", "delta_2", "delta_4", "delta_8",
                "delta_16", "oa"]


def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for k in range(args.clips):
        spec = SceneSpec(seed=args.seed * 100003 + k, width=args.width,
                         height=args.height, frames=args.frames,
                         sprites=args.sprites, occluders=args.occluders,
                         n_points=args.points)
        clip = generate_clip(spec)
        path = os.path.join(args.out, f"clip_{k:03d}")
        F.write_clip(path, clip)
        print(f"wrote {path} ({clip.n_frames} frames, {clip.n_points} points)")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(F.read_config(args.config))
    params, _, lines = run_training(cfg, progress_every=args.progress)
    if args.log:
        F.atomic_write_text(args.log, "\n".join(lines) + "\n")
    F.save_checkpoint(args.out, params, cfg.canonical_text())
    print(f"wrote {args.out}")
    return 0


def _select_queries(clip, n, seed):
    pool = np.flatnonzero(clip.gt_v[clip.query_frame])
    if pool.size == 0:
        raise ValueError("clip has no visible points at the query frame")
    if n is None or n >= pool.size:
        chosen = pool
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        chosen = np.sort(rng.choice(pool, size=n, replace=False))
    return clip.gt_p[clip.query_frame, chosen].copy(), chosen


def cmd_track_points(args) -> int:
    params, cfg = F.load_model(args.checkpoint)
    clip = F.read_clip(args.clip)
    queries, chosen = _select_queries(clip, args.queries, args.seed)
    pred_p, pred_v, pred_rho = track_clip(clip, queries, params, cfg.model_config())
    h, w = clip.image_shape
    F.write_trackfile(args.out, (w, h), clip.query_frame, chosen, queries,
                      pred_p, pred_v, pred_rho,
                      first_frame=clip.query_frame + 1)
    print(f"wrote {args.out} ({len(chosen)} queries, {len(pred_p)} frames)")
    return 0


def cmd_eval_points(args) -> int:
    track = F.read_trackfile(args.track)
    clip = F.read_clip(args.clip)
    h, w = clip.image_shape
    if track.resolution != (w, h):
        raise FormatError(args.track, f"resolution {track.resolution} does not "
                                      f"match clip {(w, h)}")
    lo = track.first_frame
    hi = lo + len(track.positions)
    if lo <= clip.query_frame or hi > clip.n_frames:
        raise FormatError(args.track, f"frames [{lo}, {hi}) outside the clip's "
                                      f"tracked range")
    sel = track.pool_indices
    if sel.min() < 0 or sel.max() >= clip.gt_p.shape[1]:
        raise FormatError(args.track, "pool index out of range for this clip")
    rep = metrics(track.positions, track.visibility > 0.5,
                  clip.gt_p[lo:hi, sel], clip.gt_v[lo:hi, sel], (h, w))
    for key in METRIC_ORDER:
        print(f"{key} {rep[key]:.6f}")
    return 0


def cmd_track_objects(args) -> int:
    clip = F.read_clip(args.clip)
    dets = F.read_detections(args.detections, clip.n_frames)
    cfg = AssocConfig(n_px=args.n_px, outlier_timeout=args.timeout,
                      t_lost=args.t_lost, tau_match=args.tau_match,
                      tau_spawn=args.tau_spawn, seed=args.seed)
    if args.transcript:
        registrations, table = F.read_transcript(args.transcript)
        predictor = ReplayPredictor(table, registrations)
    elif args.checkpoint:
        params, tcfg = F.load_model(args.checkpoint)
        predictor = LbmPointPredictor(params, tcfg.model_config(), clip.frames)
    else:
        raise ValueError("track-objects needs --checkpoint or --transcript")
    recorder = None
    if args.record:
        recorder = F.RecordingPredictor(predictor)
        predictor = recorder
    _, events = track_objects(dets, predictor, cfg)
    F.write_events(args.out, events)
    if recorder is not None:
        F.write_transcript(args.record, recorder.registrations,
                           recorder.dense_table())
    print(f"wrote {args.out} ({len(events)} events)")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return 0 if run_selftest(fast=args.fast) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lbmtrack",
        description="online point tracking, object association, and the "
                    "synthetic training harness")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic clips to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--clips", type=int, default=1)
    g.add_argument("--frames", type=int, default=12)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=48)
    g.add_argument("--sprites", type=int, default=3)
    g.add_argument("--occluders", type=int, default=1)
    g.add_argument("--points", type=int, default=24)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--progress", type=int, default=0)
    t.set_defaults(func=cmd_train)

    tp = sub.add_parser("track-points", help="run online tracking over a clip")
    tp.add_argument("--checkpoint", required=True)
    tp.add_argument("--clip", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--queries", type=int, default=None,
                    help="subsample this many queries (default: all visible)")
    tp.add_argument("--seed", type=int, default=0)
    tp.set_defaults(func=cmd_track_points)

    ep = sub.add_parser("eval-points", help="score a track file against gt")
    ep.add_argument("--track", required=True)
    ep.add_argument("--clip", required=True)
    ep.set_defaults(func=cmd_eval_points)

    to = sub.add_parser("track-objects", help="associate detections via points")
    to.add_argument("--clip", required=True)
    to.add_argument("--detections", required=True)
    to.add_argument("--out", required=True)
    to.add_argument("--checkpoint")
    to.add_argument("--transcript", help="replay recorded point predictions")
    to.add_argument("--record", help="record point predictions to this file")
    to.add_argument("--n-px", type=int, default=16)
    to.add_argument("--timeout", type=int, default=2)
    to.add_argument("--t-lost", type=int, default=10)
    to.add_argument("--tau-match", type=float, default=0.3)
    to.add_argument("--tau-spawn", type=float, default=0.5)
    to.add_argument("--seed", type=int, default=0)
    to.set_defaults(func=cmd_track_objects)

    st = sub.add_parser("selftest", help="run the built-in oracle/property checks")
    st.add_argument("--fast", action="store_true",
                    help="skip the slower training checks")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, T.TensorError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
