"""Command-line entry point: ingest, synth, train, score, eval, bench.

JSON results go to stdout, diagnostics to stderr, artifacts into ``--out``
directories, each with exactly one run manifest. Exit codes: 0 success,
2 schema error, 3 id mismatch, 4 numeric failure, 5 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, annotations, costmodel, detector, kernels, metrics
from .errors import ConfigError, IdMismatchError, NumericError, RowError, SchemaError

EXIT_SCHEMA = 2
EXIT_ID_MISMATCH = 3
EXIT_NUMERIC = 4
EXIT_CONFIG = 5

DEFAULT_ANTICIPATION = 5.0
DEFAULT_LATENCY = 10.0
DEFAULT_KS = "1,2,3"
DEFAULT_SWEEP = 20

# duration and start-time histogram bin edges (seconds) for --stats
DURATION_BINS = [0.0, 1.0, 2.0, 5.0, 10.0, 30.0, 60.0, 120.0, 300.0, float("inf")]
START_BINS = [0.0, 60.0, 120.0, 300.0, 600.0, 1200.0, 1800.0, 3600.0, float("inf")]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigError(message)


def _hash_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(child.name.encode())
            h.update(child.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int | None, inputs: list[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "input_hashes": {str(p): _hash_path(p) for p in inputs},
        "tool_version": __version__,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _histogram(values: list[float], edges: list[float]) -> dict[str, int]:
    out = {}
    for lo, hi in zip(edges[:-1], edges[1:]):
        label = f"[{lo:g},{hi:g})" if hi != float("inf") else f"[{lo:g},inf)"
        out[label] = int(sum(1 for v in values if lo <= v < hi))
    return out


# -- commands -------------------------------------------------------------------


def cmd_ingest(args) -> int:
    path = Path(args.annotations)
    anns = annotations.parse_annotations(path.read_bytes())
    payload: dict = {
        "annotations": len(anns),
        "videos": len({a.video_uid for a in anns}),
    }
    if args.stats:
        by_split: dict[str, int] = {}
        by_source: dict[str, int] = {}
        for a in anns:
            by_split[a.split] = by_split.get(a.split, 0) + 1
            by_source[a.source] = by_source.get(a.source, 0) + 1
        payload["by_split"] = by_split
        payload["by_source"] = by_source
        payload["event_duration_bins"] = _histogram([a.end_sec - a.start_sec for a in anns], DURATION_BINS)
        payload["start_time_bins"] = _histogram([a.start_sec for a in anns], START_BINS)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ingest_stats.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        write_manifest(out, "ingest", {"stats": bool(args.stats)}, None, [path])
    _emit(payload)
    return 0


def _corpus_annotations(specs, n_train: int) -> list:
    anns = []
    for i, spec in enumerate(specs):
        frames, query, ann = annotations.gen_synthetic(spec, spec.dim)
        ann = replace(ann, split="train" if i < n_train else "val")
        anns.append((spec, frames, query, ann))
    return anns


def cmd_synth(args) -> int:
    out = Path(args.out)
    specs = annotations.make_corpus_specs(
        n_streams=args.streams + args.val_streams,
        seed=args.seed,
        dim=args.dim,
        n_frames=args.frames,
        noise_scale=args.noise,
        fps=args.fps,
        n_distractors=args.distractors,
        n_queries=args.queries,
    )
    rows = _corpus_annotations(specs, args.streams)
    streams_dir = out / "streams"
    anns = []
    for spec, frames, query, ann in rows:
        sidecar = {
            "video_uid": ann.video_uid,
            "fps": spec.fps,
            "dim": spec.dim,
            "n_frames": spec.n_frames,
            "seed": spec.seed,
        }
        annotations.save_stream(streams_dir / f"{ann.video_uid}.f32", frames, sidecar, query)
        anns.append(ann)
    (out / "annotations.csv").write_bytes(annotations.serialize_annotations(anns))
    write_manifest(
        out,
        "synth",
        {
            "streams": args.streams, "val_streams": args.val_streams, "dim": args.dim,
            "frames": args.frames, "noise": args.noise, "fps": args.fps,
            "distractors": args.distractors, "queries": args.queries,
        },
        args.seed,
        [],
    )
    _emit({"out": str(out), "train_streams": args.streams, "val_streams": args.val_streams})
    return 0


def _load_corpus(data_dir: Path, split: str):
    anns = annotations.parse_annotations((data_dir / "annotations.csv").read_bytes())
    picked = [a for a in anns if a.split == split]
    streams = {}
    for a in picked:
        frames, sidecar, query = annotations.load_stream(data_dir / "streams" / f"{a.video_uid}.f32")
        if query is None:
            raise SchemaError(f"stream {a.video_uid} has no query embedding file")
        streams[a.video_uid] = (frames, sidecar, query)
    return picked, streams


def _adapter_config(kind: str, d: int, d_prime: int | None, k: int) -> kernels.AdapterConfig:
    dp = d_prime if d_prime else kernels.default_reduced_dim(kind, d, k)
    return kernels.AdapterConfig(d=d, d_prime=dp, kind=kind, k=k)


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.out)
    anns, streams = _load_corpus(data_dir, "train")
    if not anns:
        raise ConfigError(f"no train-split annotations in {data_dir}")
    dim = streams[anns[0].video_uid][0].shape[1]

    adapter = _adapter_config(args.kind, dim, args.d_prime, args.k)
    w_s = args.ws if args.ws else (30 if args.kind == "retention" else 60)
    model_config = detector.ModelConfig(
        d_in=dim, d=dim, n_blocks=args.blocks, adapter=adapter, tau_sim=args.tau_sim, seed=args.seed
    )
    model = detector.build_model(model_config)

    rng = np.random.default_rng(args.seed)
    dataset = []
    for a in anns:
        frames, sidecar, query = streams[a.video_uid]
        for _ in range(args.windows_per_annotation):
            window = annotations.sample_windows(a, w_s, args.fps, int(rng.integers(2**31 - 1)))
            idx = np.round(window.frame_times * args.fps).astype(int)
            dataset.append(
                detector.TrainingExample(
                    embeddings=frames[idx], labels=window.labels, query=query, video_uid=a.video_uid
                )
            )

    train_config = detector.TrainConfig(
        w_s=w_s,
        fps=args.fps,
        learning_rate=args.lr,
        steps=args.steps,
        batch_size=args.batch,
        pos_weight_cap=args.pos_cap,
        seed=args.seed,
        optimizer=args.optimizer,
        weight_decay=args.weight_decay,
    )
    trained, history = detector.train(model, dataset, train_config)

    out.mkdir(parents=True, exist_ok=True)
    detector.save_model(out / "checkpoint.sdqk", trained)
    (out / "curve.csv").write_text(detector.loss_curve_csv(history), encoding="utf-8")
    train_manifest = {
        "config": {
            "w_s": w_s, "fps": args.fps, "learning_rate": args.lr, "steps": args.steps,
            "batch_size": args.batch, "pos_weight_cap": args.pos_cap,
            "optimizer": args.optimizer, "weight_decay": args.weight_decay,
            "kind": args.kind, "d_prime": adapter.d_prime, "k": args.k,
            "blocks": args.blocks, "tau_sim": args.tau_sim,
        },
        "seed": args.seed,
        "final_loss": history[-1].total if history else None,
        "steps": len(history),
    }
    (out / "train_manifest.json").write_text(
        json.dumps(train_manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    write_manifest(out, "train", train_manifest["config"], args.seed, [data_dir])
    _emit({"checkpoint": str(out / "checkpoint.sdqk"), "steps": len(history),
           "final_loss": history[-1].total if history else None})
    return 0


def cmd_score(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.out)
    model = detector.load_model(Path(args.checkpoint))
    anns, streams = _load_corpus(data_dir, args.split)
    if not anns:
        raise ConfigError(f"no {args.split}-split annotations in {data_dir}")
    scores_dir = out / "scores"
    for a in anns:
        frames, sidecar, query = streams[a.video_uid]
        series = detector.infer_streaming(
            model, frames, query,
            video_uid=a.video_uid, query_id=metrics.default_query_id(a), fps=float(sidecar["fps"]),
        )
        metrics.save_score_series(scores_dir, series)
    write_manifest(out, "score", {"split": args.split}, None, [Path(args.checkpoint), data_dir])
    _emit({"scores": str(scores_dir), "series": len(anns)})
    return 0


def cmd_eval(args) -> int:
    scores_dir = Path(args.scores)
    ann_path = Path(args.annotations)
    series = metrics.load_score_series_dir(scores_dir)
    anns = annotations.parse_annotations(ann_path.read_bytes())
    if args.split:
        anns = [a for a in anns if a.split == args.split]
    if not anns:
        raise ConfigError("no annotations selected for evaluation")
    window = metrics.ToleranceWindow(args.anticipation, args.latency)
    ks = [int(k) for k in args.k.split(",")]
    mode = "rising_edge" if args.mode == "edge" else "every_frame"

    if args.sweep:
        threshold, report = metrics.sweep_thresholds(
            series, anns, window, n=args.sweep, objective_k=min(ks), ks=ks, mode=mode
        )
    else:
        threshold = args.threshold
        report = metrics.evaluate_dataset(series, anns, ks, window, mode, threshold)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        write_manifest(
            out,
            "eval",
            {
                "anticipation": args.anticipation, "latency": args.latency, "k": args.k,
                "mode": args.mode, "threshold": threshold, "sweep": args.sweep, "split": args.split,
            },
            None,
            [scores_dir, ann_path],
        )
    print(report.to_json())
    return 0


def cmd_bench(args) -> int:
    backbone = costmodel.vit_backbone_stack(d=args.d, n_blocks=args.blocks)
    dp = args.d_prime if args.d_prime else kernels.default_reduced_dim(args.kind, args.d, args.k)
    adapters = costmodel.adapter_stack(
        args.kind, args.d, dp, k=args.k, insertions=args.insertions_per_block * args.blocks
    )
    report = costmodel.cost_report(
        backbone + adapters, tokens=args.tokens, baseline=backbone, baseline_name=args.baseline
    )
    payload: dict = {
        "cost": report.to_dict(),
        "sliding_window_overhead_pct": costmodel.sliding_window_overhead(
            costmodel.count_macs(backbone, args.tokens), args.window
        ),
    }

    if args.frames:
        adapter = _adapter_config(args.kind, args.latency_d, None, args.k)
        model = detector.build_model(
            detector.ModelConfig(
                d_in=args.latency_d, d=args.latency_d, n_blocks=args.latency_blocks,
                adapter=adapter, seed=args.seed,
            )
        )
        latency = costmodel.bench_latency(
            model, n_frames=args.frames, repetitions=args.reps, window=args.window, seed=args.seed
        )
        latency_out = {k: v for k, v in latency.items() if k != "frame_times"}
        latency_out["frame_time_probes"] = {
            str(i): costmodel.frame_time_at(latency, i)
            for i in (10, 100, 1000)
            if i < args.frames
        }
        payload["latency"] = latency_out

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        write_manifest(
            out, "bench",
            {"kind": args.kind, "d": args.d, "tokens": args.tokens, "frames": args.frames},
            args.seed, [],
        )
    _emit(payload)
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="streamstart", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate an annotation CSV and emit stats")
    p.add_argument("--annotations", required=True)
    p.add_argument("--stats", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="materialize a seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--streams", type=int, default=200, help="train-split streams")
    p.add_argument("--val-streams", type=int, default=50)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--fps", type=float, default=1.0)
    p.add_argument("--distractors", type=int, default=1)
    p.add_argument("--queries", type=int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train adapters on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=kernels.KINDS, default="qrnn")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--ws", type=int, default=0, help="window frames (0 = kind default: 60, 30 for retention)")
    p.add_argument("--fps", type=float, default=1.0)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--d-prime", type=int, default=0)
    p.add_argument("--pos-cap", type=float, default=detector.DEFAULT_POS_CAP)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--tau-sim", type=float, default=detector.DEFAULT_TAU_SIM)
    p.add_argument("--windows-per-annotation", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="stream a corpus split through a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=annotations.SPLITS, default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute SR@k / SMD@k from score series")
    p.add_argument("--scores", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--anticipation", type=float, default=DEFAULT_ANTICIPATION)
    p.add_argument("--latency", type=float, default=DEFAULT_LATENCY)
    p.add_argument("--k", default=DEFAULT_KS)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sweep", type=int, default=0, help="sweep N uniform thresholds instead of --threshold")
    p.add_argument("--mode", choices=("edge", "frame"), default="edge")
    p.add_argument("--split", choices=annotations.SPLITS, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="cost accounting and the latency harness")
    p.add_argument("--kind", choices=kernels.KINDS, default="vanilla")
    p.add_argument("--d", type=int, default=768)
    p.add_argument("--d-prime", type=int, default=0)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--tokens", type=int, default=197)
    p.add_argument("--blocks", type=int, default=12)
    p.add_argument("--insertions-per-block", type=int, default=2)
    p.add_argument("--baseline", default="backbone")
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--frames", type=int, default=0, help="run the wall-clock harness over N frames")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--latency-d", type=int, default=128)
    p.add_argument("--latency-blocks", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (SchemaError, RowError) as err:
        print(f"schema error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except IdMismatchError as err:
        print(f"id mismatch: {err}", file=sys.stderr)
        return EXIT_ID_MISMATCH
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
