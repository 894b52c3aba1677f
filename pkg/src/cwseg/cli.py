"""Command-line surface: segment a sequence under a clockwork schedule,
evaluate predictions against ground truth, benchmark schedules, and generate
deterministic test weights.

Exit codes: 0 success, 2 usage errors, 3 file/format errors, 4 contract or
shape errors. Reports are plain JSON on stdout; the segment command also
writes one palette mask per frame plus a line-delimited JSON trace file.

The eval command shards frames across a thread pool (confusion matrices
merge exactly, so the result is order-independent); CWSEG_THREADS caps the
worker count.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, FileFormatError, ShapeError
from .media_io import (
    DEFAULT_PALETTE,
    SequenceManifest,
    decode_gt_mask,
    gen_weights,
    parse_palette,
    read_image,
    read_manifest,
    read_weights,
    write_mask,
    write_weights,
)
from .metrics import ConfusionMatrix, build_report
from .net import NetConfig, StagedNet, StageId, build_net
from .scheduler import (
    Adaptive,
    Always,
    ClockSchedule,
    Fixed,
    SkipPolicy,
    StageTrace,
    run_sequence,
    step,
)

_STAGE_LABELS = tuple(s.label for s in StageId)


def _schedule_from_args(args) -> ClockSchedule:
    if args.schedule == "always":
        return Always()
    if args.schedule == "fixed":
        return Fixed(period2=args.period2, period3=args.period3)
    return Adaptive(theta=args.theta)


def _load_net(weights_path, first_frame_shape) -> StagedNet:
    """Build the network, inferring the config from the weight store and the
    first frame's dimensions."""
    store = read_weights(weights_path)
    for need in ("conv1_1", "score_fr"):
        if need not in store:
            raise ContractError(f"weight store is missing entry '{need}'")
    base_width = int(store["conv1_1"].shape[0])
    in_channels = int(store["conv1_1"].shape[1])
    num_classes = int(store["score_fr"].shape[0])
    c, h, w = first_frame_shape
    if c != in_channels:
        raise ShapeError(
            f"frames have {c} channels but weights expect {in_channels}"
        )
    cfg = NetConfig(
        in_channels=in_channels,
        num_classes=num_classes,
        base_width=base_width,
        height=int(h),
        width=int(w),
    )
    return build_net(cfg, store)


def _check_unique_stems(manifest: SequenceManifest) -> None:
    stems = [p.stem for p in manifest.frames]
    if len(set(stems)) != len(stems):
        dup = next(s for s in stems if stems.count(s) > 1)
        raise FileFormatError(
            f"manifest has multiple frames with stem '{dup}'; "
            f"output names would collide"
        )


def _trace_record(trace: StageTrace, frame_path) -> dict:
    return {
        "frame_index": trace.frame_index,
        "frame": str(frame_path),
        "fired": sorted(int(s) for s in trace.fired),
        "change": trace.change,
        "elapsed": trace.elapsed,
        "convs": trace.convs,
        "macs": trace.macs,
    }


def _firing_counts(traces) -> dict[str, int]:
    counts = {label: 0 for label in _STAGE_LABELS}
    for t in traces:
        for s in t.fired:
            counts[s.label] += 1
    return counts


def cmd_segment(args) -> int:
    palette = parse_palette(args.palette)
    manifest = read_manifest(args.manifest, palette)
    _check_unique_stems(manifest)
    schedule = _schedule_from_args(args)
    policy = SkipPolicy(args.skip_policy)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    first = read_image(manifest.frames[0])
    net = _load_net(args.weights, first.shape)
    if net.cfg.num_classes > len(palette):
        raise ContractError(
            f"network predicts {net.cfg.num_classes} classes but the "
            f"palette has only {len(palette)} colors"
        )

    traces = []
    state = None
    trace_path = out_dir / "trace.jsonl"
    with open(trace_path, "w", encoding="utf-8") as trace_file:
        for index, frame_path in enumerate(manifest.frames):
            frame = first if index == 0 else read_image(frame_path)
            mask, state, trace = step(net, schedule, policy, state, frame)
            write_mask(mask, palette, out_dir / f"{frame_path.stem}.ppm")
            if args.save_scores:
                if (StageId.STAGE3 in trace.fired
                        or policy is SkipPolicy.REUSE_FINAL):
                    scores = state.cached_final
                else:
                    scores = _refuse_scores(net, state)
                write_weights({"scores": scores},
                              out_dir / f"{frame_path.stem}.scores.cwf")
            traces.append(trace)
            trace_file.write(json.dumps(_trace_record(trace, frame_path)) + "\n")

    summary = {
        "frames": len(manifest.frames),
        "out_dir": str(out_dir),
        "trace": str(trace_path),
        "firings": _firing_counts(traces),
    }
    print(json.dumps(summary, indent=2))
    return 0


def _refuse_scores(net: StagedNet, state):
    """Scores for a fuse-cached-deep frame where stage 3 was skipped: the
    same fusion the step performed, rebuilt from the advanced state (whose
    pool3/pool4 caches are the freshest maps)."""
    from .net import fuse_and_upsample

    return fuse_and_upsample(
        net, state.cached_score_fr, state.cached_score_pool4,
        state.cached_score_pool3,
    )


def _eval_worker_count() -> int:
    env = os.environ.get("CWSEG_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ContractError(f"CWSEG_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise ContractError(f"CWSEG_THREADS must be >= 1, got {n}")
        return n
    return min(4, os.cpu_count() or 1)


def cmd_eval(args) -> int:
    palette = parse_palette(args.palette)
    manifest = read_manifest(args.manifest, palette)
    if manifest.truths is None:
        raise FileFormatError(
            f"{args.manifest}: manifest has no ground-truth column"
        )
    num_classes = len(palette)
    if not 0 <= args.positive_class < num_classes:
        raise ContractError(
            f"--positive-class {args.positive_class} out of range "
            f"[0, {num_classes})"
        )
    pred_dir = Path(args.pred_dir)
    scores_dir = Path(args.scores_dir) if args.scores_dir else None

    def eval_frame(pair):
        frame_path, truth_path = pair
        pred_path = pred_dir / f"{frame_path.stem}.ppm"
        if not pred_path.exists():
            raise FileFormatError(
                f"missing prediction for frame '{frame_path.stem}': {pred_path}"
            )
        truth = decode_gt_mask(read_image(truth_path), palette)
        pred = decode_gt_mask(read_image(pred_path), palette)
        cm = ConfusionMatrix(num_classes).add(truth, pred)
        if scores_dir is None:
            return cm, None, None
        scores_path = scores_dir / f"{frame_path.stem}.scores.cwf"
        if not scores_path.exists():
            raise FileFormatError(
                f"missing scores for frame '{frame_path.stem}': {scores_path}"
            )
        store = read_weights(scores_path)
        if "scores" not in store:
            raise FileFormatError(f"{scores_path}: no 'scores' entry")
        chw = store["scores"]
        if chw.ndim != 3 or chw.shape[0] <= args.positive_class:
            raise ShapeError(
                f"{scores_path}: scores shape {chw.shape} lacks positive "
                f"class channel {args.positive_class}"
            )
        if chw.shape[1:] != truth.shape:
            raise ShapeError(
                f"{scores_path}: scores spatial shape {chw.shape[1:]} != "
                f"truth shape {truth.shape}"
            )
        return cm, chw[args.positive_class].ravel(), truth.ravel()

    pairs = list(zip(manifest.frames, manifest.truths))
    workers = _eval_worker_count()
    if workers == 1:
        results = [eval_frame(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(eval_frame, pairs))

    total_cm = ConfusionMatrix(num_classes)
    for cm, _, _ in results:
        total_cm = total_cm + cm
    pooled_scores = pooled_truth = None
    if scores_dir is not None:
        pooled_scores = np.concatenate([r[1] for r in results])
        pooled_truth = np.concatenate([r[2] for r in results])

    report = build_report(
        total_cm, positive_class=args.positive_class,
        scores=pooled_scores, truth=pooled_truth,
    )
    text = json.dumps(report.to_dict(), indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def _sum_elapsed(traces) -> dict[str, float]:
    out: dict[str, float] = {}
    for t in traces:
        for key, dt in t.elapsed.items():
            out[key] = out.get(key, 0.0) + dt
    return out


def _sum_macs(traces) -> int:
    return sum(sum(t.macs.values()) for t in traces)


def cmd_bench(args) -> int:
    palette = parse_palette(args.palette)
    manifest = read_manifest(args.manifest, palette)
    schedule = _schedule_from_args(args)
    policy = SkipPolicy(args.skip_policy)

    frames = [read_image(p) for p in manifest.frames]
    net = _load_net(args.weights, frames[0].shape)

    def run_arm(arm_schedule):
        wall = 0.0
        traces = None
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            _, traces = run_sequence(net, arm_schedule, policy, frames)
            wall += time.perf_counter() - t0
        return wall, traces

    full_wall, full_traces = run_arm(Always())
    cw_wall, cw_traces = run_arm(schedule)

    full_macs = _sum_macs(full_traces)
    cw_macs = _sum_macs(cw_traces)
    report = {
        "frames": len(frames),
        "repeat": args.repeat,
        "full": {
            "total_elapsed": full_wall,
            "per_stage_elapsed": _sum_elapsed(full_traces),
            "macs": full_macs,
            "firings": _firing_counts(full_traces),
        },
        "clockwork": {
            "schedule": args.schedule,
            "total_elapsed": cw_wall,
            "per_stage_elapsed": _sum_elapsed(cw_traces),
            "macs": cw_macs,
            "firings": _firing_counts(cw_traces),
        },
        "wall_ratio": cw_wall / full_wall,
        "speedup_wall": full_wall / cw_wall,
        "work_ratio": cw_macs / full_macs,
        "speedup_work": full_macs / cw_macs,
    }
    print(json.dumps(report, indent=2))
    return 0


def cmd_gen_weights(args) -> int:
    cfg = NetConfig(
        in_channels=args.in_channels,
        num_classes=args.classes,
        base_width=args.base_width,
    )
    store = gen_weights(cfg, args.seed)
    write_weights(store, args.out)
    print(json.dumps({"out": str(args.out), "entries": len(store),
                      "seed": args.seed}))
    return 0


def _add_schedule_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--schedule", choices=("always", "fixed", "adaptive"),
                     default="always", help="stage firing rule")
    sub.add_argument("--period2", type=int, default=2,
                     help="fixed schedule: stage-2 period")
    sub.add_argument("--period3", type=int, default=4,
                     help="fixed schedule: stage-3 period")
    sub.add_argument("--theta", type=float, default=0.05,
                     help="adaptive schedule: change threshold")
    sub.add_argument("--skip-policy", choices=[p.value for p in SkipPolicy],
                     default=SkipPolicy.FUSE_CACHED_DEEP.value,
                     help="output rule on frames where stage 3 is skipped")


def _add_palette_flag(sub: argparse.ArgumentParser) -> None:
    default = ":".join(",".join(str(v) for v in c) for c in DEFAULT_PALETTE)
    sub.add_argument("--palette", default=default,
                     help="class colors, 'R,G,B:R,G,B:...' (index = class)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cwseg",
        description="Clockwork-scheduled fully convolutional video segmentation",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    seg = subs.add_parser("segment", help="segment a frame sequence")
    seg.add_argument("manifest", help="frame list file")
    seg.add_argument("--weights", required=True, help="CWFCN1 weight store")
    seg.add_argument("--out", required=True, help="output directory")
    seg.add_argument("--save-scores", action="store_true",
                     help="also save per-frame final score maps")
    _add_schedule_flags(seg)
    _add_palette_flag(seg)
    seg.set_defaults(func=cmd_segment)

    ev = subs.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("pred_dir", help="directory of predicted masks")
    ev.add_argument("manifest", help="frame list with ground-truth column")
    ev.add_argument("--positive-class", type=int, default=1,
                    help="class index for the binary columns")
    ev.add_argument("--scores-dir", default=None,
                    help="directory of saved score maps (enables avg_precision)")
    ev.add_argument("--out", default=None, help="also write the report here")
    _add_palette_flag(ev)
    ev.set_defaults(func=cmd_eval)

    be = subs.add_parser("bench", help="time a schedule against full inference")
    be.add_argument("manifest", help="frame list file")
    be.add_argument("--weights", required=True, help="CWFCN1 weight store")
    be.add_argument("--repeat", type=int, default=1,
                    help="passes over the sequence per arm")
    _add_schedule_flags(be)
    _add_palette_flag(be)
    be.set_defaults(func=cmd_bench)

    gw = subs.add_parser("gen-weights", help="write deterministic test weights")
    gw.add_argument("--seed", type=int, default=0)
    gw.add_argument("--base-width", type=int, default=8)
    gw.add_argument("--classes", type=int, default=2)
    gw.add_argument("--in-channels", type=int, default=3)
    gw.add_argument("--out", required=True)
    gw.set_defaults(func=cmd_gen_weights)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ShapeError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
