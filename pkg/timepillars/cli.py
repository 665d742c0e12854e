"""
Command-line entry point: ``python -m timepillars [global flags] <command> ...``.

Commands: synth, train, eval, infer, plot-bev, bench, compare. Every command
writes into one output folder (``--out`` or a timestamped
``data/runs/<command>_<timestamp>``) together with the resolved
``config.yaml``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import numpy as np
from tqdm import tqdm

from .config import ConfigError, apply_overrides, config_from_dict, load_config
from .dataio import SequenceFormatError, generate_scene, list_dataset, load_sequence, save_dataset
from .evaluation import decode_detections, evaluate, read_detections, write_detections
from .network import Detector, build_model
from .numerics import no_grad, read_checkpoint
from .pillars import pillarize, prepare_points
from .plotting import render_bev
from .training import CheckpointError, Trainer, load_checkpoint, transfer_weights

RUNS_DIR = Path("data") / "runs"
CHECKPOINT_NAME = "checkpoint"
LOSS_LOG_NAME = "loss_log.csv"
LOSS_COLUMNS = ("step", "total", "focal", "loc", "ang", "aux", "k")
BENCH_STAGES = ("pillarize", "encode", "forward", "e2e")

VARIANTS = {
    "baseline": ["model.kind=pointpillars"],
    "mf": ["model.kind=mf_pointpillars"],
    "tp-preprocessing": ["model.kind=timepillars", "model.compensation=preprocessing"],
    "tp-interpolation": ["model.kind=timepillars", "model.compensation=interpolation"],
    "tp-conv": ["model.kind=timepillars", "model.compensation=conv"],
    "tp-conv-noaux": ["model.kind=timepillars", "model.compensation=conv",
                      "model.aux_task=false", "loss.lambda_aux=0.0"],
    "tp-before": ["model.kind=timepillars", "model.compensation=conv",
                  "model.memory_placement=before_backbone"],
}

BANNER = "=" * 70


def banner(title):
    print("\n" + BANNER)
    print(title)
    print(BANNER)


def run_folder(out, command):
    """``--out`` if given, else a fresh timestamped folder under data/runs."""
    if out is not None:
        folder = Path(out)
    else:
        timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
        folder = RUNS_DIR / f"{command}_{timestamp}"
    folder.mkdir(parents=True, exist_ok=True)
    return folder


def save_json(path, data):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
    print(f"   ✓ Saved: {path}")
    return path


def save_text(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    print(f"   ✓ Saved: {path}")
    return path


def load_sequences(data_dir):
    data_dir = Path(data_dir)
    paths = list_dataset(data_dir)
    if not paths:
        raise ValueError(f"dataset {data_dir} lists no sequences")
    return [load_sequence(p) for p in tqdm(paths, desc="Loading sequences", unit="seq")]


def model_from_checkpoint(config, checkpoint):
    """Detector with the checkpoint's weights; shape mismatches raise CheckpointError."""
    model = build_model(config)
    meta = load_checkpoint(checkpoint, model)
    return model.eval(), meta


def config_for_checkpoint(args, checkpoint):
    """An explicit --config wins; otherwise the config stored in the checkpoint is reused."""
    if args.config is None:
        _, meta = read_checkpoint(checkpoint)
        if "config" in meta:
            return config_from_dict(apply_overrides(meta["config"], args.set, args.seed))
    return load_config(args.config, args.set, args.seed)


def predict_frames(model, sequences, eval_config, desc="Evaluating"):
    """[(detections, annotations)] per sequence with the model in inference mode."""
    model.eval()
    frames = []
    with no_grad():
        for sequence in tqdm(sequences, desc=desc, unit="seq"):
            head = model.forward_sequence(sequence)
            dets = decode_detections(head, model.grid, eval_config.score_threshold,
                                     eval_config.nms_iou, eval_config.max_candidates)
            frames.append((dets, sequence.annotations))
    return frames


def check_data(config, sequences):
    """Reject data the configured model cannot be trained on."""
    if not sequences:
        raise ValueError("no training sequences")
    needs_past = config.model.kind != "pointpillars" and config.model.n_scans > 1
    if needs_past and not any(seq.past for seq in sequences):
        raise ValueError(f"model kind {config.model.kind!r} needs past scans but every sequence holds only a core frame")
    grid = config.grid
    boxes = [b for seq in sequences for b in seq.annotations]
    inside = [b for b in boxes if grid.x_min <= b.cx < grid.x_max and grid.y_min <= b.cy < grid.y_max]
    if boxes and not inside:
        raise ValueError("no annotation falls inside the configured grid; data and grid do not match")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(config, count, out_dir):
    """Generate ``count`` synthetic sequences (scene seeds seed, seed + 1, ...)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    banner(f"🎯 GENERATING {count} SYNTHETIC SEQUENCES")
    base = config.scene
    sequences = []
    for i in tqdm(range(count), desc="Generating", unit="seq"):
        sequences.append(generate_scene(replace(base, seed=base.seed + i)))
    index_path = save_dataset(sequences, out_dir)
    print(f"   ✓ Saved: {index_path}")
    n_boxes = sum(len(s.annotations) for s in sequences)
    print(f"\n📊 {count} sequences, {base.n_scans} scans each, {n_boxes} annotated objects")
    return index_path


def cmd_train(config, data_dir, out_dir, resume=None):
    """Train on a dataset folder; writes the checkpoint and a per-step CSV loss log."""
    banner(f"🧠 TRAINING {config.model.kind.upper()}")
    sequences = load_sequences(data_dir)
    check_data(config, sequences)

    model = build_model(config)
    trainer = Trainer(model, config.loss, config.train)
    if resume is not None:
        trainer.resume(resume)
        print(f"   ✓ Resumed from {resume} at step {trainer.step}")
    else:
        if config.train.transfer_from:
            report = transfer_weights(model, config.train.transfer_from)
            print(f"   ✓ Transferred {len(report['copied'])} tensors, "
                  f"{len(report['fresh'])} fresh, {len(report['frozen'])} frozen")
        freqs = trainer.prepare(sequences)
        print(f"   ✓ Class frequencies: {', '.join(f'{f:.4f}' for f in freqs)}")

    log_path = Path(out_dir) / LOSS_LOG_NAME
    mode = "a" if resume is not None and log_path.exists() else "w"
    with open(log_path, mode, newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(LOSS_COLUMNS)

        def log(step, losses):
            writer.writerow([step] + [f"{losses[c]:.10g}" for c in LOSS_COLUMNS[1:-1]] + [losses["k"]])

        def progress(order, epoch):
            return tqdm(order, desc=f"Epoch {epoch + 1}/{config.train.epochs}", unit="seq", leave=False)

        def report(epoch, history):
            if history:
                mean_total = float(np.mean([h["total"] for h in history]))
                print(f"   Epoch {epoch + 1}: mean loss {mean_total:.4f} over {len(history)} steps")

        trainer.fit(sequences, epochs=config.train.epochs, callback=log, progress=progress, on_epoch=report)
    print(f"   ✓ Saved: {log_path}")
    if trainer.skipped:
        print(f"   ⚠️  Skipped {trainer.skipped} degenerate sequences")

    index_path, _ = trainer.save(Path(out_dir) / CHECKPOINT_NAME, {"config": config.to_dict()})
    print(f"   ✓ Saved: {index_path}")
    return index_path


def cmd_eval(config, checkpoint, data_dir, out_dir, title="Detection metrics"):
    """Evaluate a checkpoint; writes metrics_report.json and metrics_report.md."""
    banner("📊 EVALUATING")
    sequences = load_sequences(data_dir)
    model, meta = model_from_checkpoint(config, checkpoint)
    frames = predict_frames(model, sequences, config.eval)
    report = evaluate(frames, config.eval)
    data = report.to_dict()
    data["checkpoint"] = str(checkpoint)
    data["trained_steps"] = meta.get("step")
    save_json(Path(out_dir) / "metrics_report.json", data)
    save_text(Path(out_dir) / "metrics_report.md", report.to_markdown(title))
    print(f"\n📊 NDS {report.nds:.4f} | mAP {report.m_ap:.4f} | mATE {report.m_ate:.4f} "
          f"| mASE {report.m_ase:.4f} | mAOE {report.m_aoe:.4f}")
    return report


def cmd_infer(config, checkpoint, data_dir, out_dir):
    """Detections JSON per sequence under ``out_dir/detections``."""
    banner("🔎 RUNNING INFERENCE")
    paths = list_dataset(data_dir)
    if not paths:
        raise ValueError(f"dataset {data_dir} lists no sequences")
    sequences = [load_sequence(p) for p in paths]
    model, _ = model_from_checkpoint(config, checkpoint)
    frames = predict_frames(model, sequences, config.eval, desc="Inferring")
    written = []
    for path, (dets, _) in zip(paths, frames):
        written.append(write_detections(Path(out_dir) / "detections" / f"{path.name}.json", dets))
    print(f"   ✓ Saved {len(written)} detection files to {Path(out_dir) / 'detections'}")
    return written


def cmd_plot_bev(sequence_path, detections_path, out_file, grid=None):
    """SVG or PPM of the core frame with ground truths and (optionally) detections."""
    banner("🖼️  RENDERING BEV")
    sequence = load_sequence(sequence_path)
    dets = read_detections(detections_path) if detections_path else []
    extent = None if grid is None else (grid.x_min, grid.x_max, grid.y_min, grid.y_max)
    path = render_bev(sequence.core.points, sequence.annotations, dets, out_file, extent,
                      title=f"{sequence.name}: {len(sequence.annotations)} gts, {len(dets)} detections")
    print(f"   ✓ Saved: {path}")
    return path


def _timing_row(stage, label, fn, repetitions):
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    times = np.asarray(times)
    mean = float(times.mean())
    return {"stage": stage, "variant": label, "repetitions": repetitions,
            "mean_s": mean, "median_s": float(np.median(times)),
            "p99_s": float(np.percentile(times, 99)), "hz": 1.0 / mean if mean > 0 else float("inf")}


def cmd_bench(config, stage, repetitions):
    """Wall-clock timings of one pipeline stage at the configured scale."""
    if stage not in BENCH_STAGES:
        raise ValueError(f"unknown bench stage {stage!r}, expected one of {BENCH_STAGES}")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    banner(f"⏱️  BENCHMARK: {stage} x{repetitions}")
    grid = config.grid
    rng = np.random.default_rng(config.train.seed)
    n_points = config.pillars.point_budget
    cloud = np.column_stack([
        rng.uniform(grid.x_min, grid.x_max, n_points), rng.uniform(grid.y_min, grid.y_max, n_points),
        rng.uniform(-1.0, 2.0, n_points), rng.uniform(0.0, 1.0, n_points),
    ]).astype(np.float32)
    rows = []
    if stage == "pillarize":
        rows.append(_timing_row(stage, f"{n_points} points",
                                lambda: pillarize(prepare_points(cloud, config.pillars), grid), repetitions))
    else:
        sequence = generate_scene(config.scene)
        single = Detector(grid, config.pillars, config.backbone,
                          replace(config.model, kind="pointpillars")).eval()
        if stage == "encode":
            pillarized = pillarize(cloud, grid)
            with no_grad():
                rows.append(_timing_row(stage, f"{len(pillarized.decorated)} points", lambda: single.encoder.forward(
                    pillarized.decorated, pillarized.cell_index), repetitions))
        elif stage == "forward":
            with no_grad():
                rows.append(_timing_row(stage, "single-frame", lambda: single.step(sequence.core), repetitions))
        else:
            recurrent = build_model(config).eval()

            def e2e(model):
                head = model.forward_sequence(sequence)
                decode_detections(head, grid, config.eval.score_threshold, config.eval.nms_iou,
                                  config.eval.max_candidates)

            with no_grad():
                rows.append(_timing_row(stage, "single-frame", lambda: e2e(single), repetitions))
                rows.append(_timing_row(stage, f"{config.model.kind} ({config.model.n_scans} scans)",
                                        lambda: e2e(recurrent), repetitions))
    for row in rows:
        print(f"   {row['variant']:<32} mean {row['mean_s'] * 1e3:9.2f} ms | median {row['median_s'] * 1e3:9.2f} ms "
              f"| p99 {row['p99_s'] * 1e3:9.2f} ms | {row['hz']:.2f} Hz")
    return rows


def cmd_compare(config, variants, train_dir, eval_dir, out_dir):
    """Train and evaluate each variant on the same data and seed; one comparison table."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variant(s) {unknown}, expected any of {list(VARIANTS)}")
    banner(f"🔬 COMPARING {len(variants)} VARIANTS")
    base = config.to_dict()
    results = {}
    for name in variants:
        variant_config = config_from_dict(apply_overrides(json.loads(json.dumps(base)), VARIANTS[name]))
        variant_dir = Path(out_dir) / name
        variant_dir.mkdir(parents=True, exist_ok=True)
        variant_config.save(variant_dir)
        checkpoint = cmd_train(variant_config, train_dir, variant_dir)
        report = cmd_eval(variant_config, checkpoint, eval_dir, variant_dir, title=f"{name} metrics")
        results[name] = report.to_dict()

    bins = list(next(iter(results.values()))["distance_bins"]) if results else []
    lines = ["# Variant comparison", "", "| variant | NDS | mAP | mATE | mASE | mAOE | " +
             " | ".join(f"AP {b}" for b in bins) + " |",
             "|---|---|---|---|---|---|" + "---|" * len(bins)]
    for name, r in results.items():
        bin_ap = []
        for b in bins:
            defined = [v for v in r["distance_bins"][b].values() if v is not None]
            bin_ap.append("n/a" if not defined else f"{np.mean(defined):.4f}")
        lines.append(f"| {name} | {r['nds']:.4f} | {r['mAP']:.4f} | {r['mATE']:.4f} | {r['mASE']:.4f} "
                     f"| {r['mAOE']:.4f} | " + " | ".join(bin_ap) + " |")
    save_json(Path(out_dir) / "compare_report.json", results)
    save_text(Path(out_dir) / "compare_report.md", "\n".join(lines) + "\n")
    return results


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="timepillars", description="Recurrent pillar-based LiDAR detection")
    parser.add_argument("--config", type=str, default=None, help="YAML run config")
    parser.add_argument("--seed", type=int, default=None, help="Seed for training and scene generation")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one config value (repeatable)")
    parser.add_argument("--out", type=str, default=None, help="Output folder (default: data/runs/<cmd>_<time>)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate synthetic sequences")
    p.add_argument("--count", type=int, default=None, help="Number of sequences (default: data.train_count)")

    p = sub.add_parser("train", help="Train a model")
    p.add_argument("--data", type=str, default=None, help="Dataset folder (default: data.train_dir)")
    p.add_argument("--resume", type=str, default=None, help="Checkpoint to resume from")

    for name, help_text in (("eval", "Evaluate a checkpoint"), ("infer", "Write detections per sequence")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", type=str, required=True)
        p.add_argument("--data", type=str, default=None, help="Dataset folder (default: data.eval_dir)")

    p = sub.add_parser("plot-bev", help="Render a core frame as SVG or PPM")
    p.add_argument("--sequence", type=str, required=True, help="Sequence folder or manifest")
    p.add_argument("--detections", type=str, default=None, help="Detections JSON")
    p.add_argument("--file", type=str, default="bev.svg", help="Figure name inside the output folder (.svg or .ppm)")

    p = sub.add_parser("bench", help="Time a pipeline stage")
    p.add_argument("--stage", choices=BENCH_STAGES, default="e2e")
    p.add_argument("--repetitions", type=int, default=10)

    p = sub.add_parser("compare", help="Train and evaluate several model variants")
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument("--train-data", type=str, default=None)
    p.add_argument("--eval-data", type=str, default=None)
    return parser


def run(args):
    if args.command in ("eval", "infer"):
        config = config_for_checkpoint(args, args.checkpoint)
    else:
        config = load_config(args.config, args.set, args.seed)
    out_dir = run_folder(args.out, args.command)
    print(f"📁 Output folder: {out_dir}")
    print(f"   ✓ Saved: {config.save(out_dir)}")

    if args.command == "synth":
        count = args.count if args.count is not None else config.data.train_count
        cmd_synth(config, count, out_dir)
    elif args.command == "train":
        cmd_train(config, args.data or config.data.train_dir, out_dir, args.resume)
    elif args.command == "eval":
        cmd_eval(config, args.checkpoint, args.data or config.data.eval_dir, out_dir)
    elif args.command == "infer":
        cmd_infer(config, args.checkpoint, args.data or config.data.eval_dir, out_dir)
    elif args.command == "plot-bev":
        cmd_plot_bev(args.sequence, args.detections, out_dir / args.file, config.grid)
    elif args.command == "bench":
        rows = cmd_bench(config, args.stage, args.repetitions)
        save_json(out_dir / "bench_report.json", rows)
        lines = [f"# Benchmark: {args.stage}", "", "| variant | mean (ms) | median (ms) | p99 (ms) | Hz |",
                 "|---|---|---|---|---|"]
        lines += [f"| {r['variant']} | {r['mean_s'] * 1e3:.2f} | {r['median_s'] * 1e3:.2f} "
                  f"| {r['p99_s'] * 1e3:.2f} | {r['hz']:.2f} |" for r in rows]
        save_text(out_dir / "bench_report.md", "\n".join(lines) + "\n")
    elif args.command == "compare":
        cmd_compare(config, args.variants, args.train_data or config.data.train_dir,
                    args.eval_data or config.data.eval_dir, out_dir)

    print("\n" + BANNER)
    print(f"✓ {args.command.upper()} COMPLETE")
    print(BANNER)
    return out_dir


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except (ConfigError, SequenceFormatError, CheckpointError, ValueError, RuntimeError, OSError) as e:
        print(f"❌ Error: {e}")
        return 1
    return 0
