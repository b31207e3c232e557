"""Experiment runner: single runs, the label-fraction sweep, metric CSVs,
checkpointing, and summary reporting."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .data import (SceneDataset, DatasetSplit, generate_dataset,
                   sample_label_fraction, split_dataset, three_class_spec,
                   twelve_class_spec)
from .detector import DetectorConfig, init_detector_params
from .evalmap import APTable
from .optim import (SGDState, clone_params, params_from_records, scheduled_lr,
                    params_to_records)
from .selftrain import (SelfTrainConfig, TeacherStudentState, TrainResult,
                        evaluate_params, train_loop)

CSV_HEADER = ["mode", "fraction", "seed", "iteration",
              "map_5095", "map_50", "per_class_json", "seconds"]


@dataclass
class MetricsRow:
    mode: str
    fraction: float
    seed: int
    iteration: int
    map_5095: float          # x100 scale
    map_50: float            # x100 scale
    per_class: dict[str, float]
    seconds: float


def scene_spec_from_config(config: ExperimentConfig):
    ds = config.dataset
    maker = three_class_spec if ds.preset == "three_class" else twelve_class_spec
    return maker(instances_per_image=ds.instances_per_image,
                 clutter_density=ds.clutter_density,
                 color_jitter=ds.color_jitter,
                 size_range=ds.size_range)


def build_dataset(config: ExperimentConfig) -> tuple[SceneDataset, DatasetSplit]:
    spec = scene_spec_from_config(config)
    dataset = generate_dataset(spec, config.dataset.image_count,
                               config.dataset.seed)
    split = split_dataset(dataset.ids, config.dataset.split_ratios,
                          config.dataset.seed)
    return dataset, split


def detector_config_from(config: ExperimentConfig, num_classes: int) -> DetectorConfig:
    d = config.detector
    return DetectorConfig(num_classes=num_classes, channels=d.channels,
                          tower_channels=d.tower_channels,
                          focal_gamma=d.focal_gamma, focal_alpha=d.focal_alpha)


def _table_to_row(config, mode, fraction, seed, iteration, table: APTable,
                  class_names, seconds) -> MetricsRow:
    per_class = {class_names[c]: round(ap * 100.0, 4)
                 for c, ap in sorted(table.per_class_5095.items())}
    return MetricsRow(mode, fraction, seed, iteration,
                      round(table.map_5095 * 100.0, 4),
                      round(table.map_50 * 100.0, 4), per_class,
                      seconds if config.record_timing else 0.0)


@dataclass
class RunOutput:
    curve_rows: list[MetricsRow]   # validation trajectory
    test_row: MetricsRow           # best-val teacher scored on the test split
    result: TrainResult


def init_run_state(config: ExperimentConfig, mode: str, fraction: float,
                   seed: int, num_classes: int) -> tuple[TeacherStudentState, DetectorConfig]:
    det_config = detector_config_from(config, num_classes)
    st_cfg = replace(config.selftrain,
                     lambda_u=0.0 if mode == "supervised" else config.selftrain.lambda_u)
    student = init_detector_params(det_config, seed)
    teacher = clone_params(student)
    opt = SGDState(config.optimizer.learning_rate, config.optimizer.momentum)
    return TeacherStudentState(teacher, student, opt, st_cfg), det_config


def run_single(config: ExperimentConfig, mode: str, fraction: float, seed: int,
               dataset: SceneDataset | None = None,
               split: DatasetSplit | None = None,
               stop_at: int | None = None,
               resume: dict | None = None) -> RunOutput | dict:
    """One training run.  With ``stop_at`` set below total_iters, returns a
    checkpoint dict instead of final metrics; pass it back as ``resume`` to
    continue bit-exactly.
    """
    if dataset is None or split is None:
        dataset, split = build_dataset(config)
    frac_split = sample_label_fraction(split, fraction, seed, dataset)
    class_names = dataset.spec.class_names
    t_start = time.perf_counter()

    if resume is None:
        state, det_config = init_run_state(config, mode, fraction, seed,
                                           dataset.class_count)
        prior_rows: list[MetricsRow] = []
        best_val, best_teacher = -1.0, None
        base_elapsed = 0.0
    else:
        state, det_config = _state_from_checkpoint(config, resume,
                                                   dataset.class_count)
        prior_rows = [MetricsRow(**r) for r in resume["curve_rows"]]
        best_val = resume["best_val_map"]
        best_teacher = params_from_records(resume["best_teacher"])
        base_elapsed = resume["elapsed"]

    curve_rows = list(prior_rows)

    def on_eval(point):
        curve_rows.append(_table_to_row(
            config, mode, fraction, seed, point.iteration, point.table,
            class_names, base_elapsed + time.perf_counter() - t_start))

    target = stop_at if stop_at is not None else config.total_iters
    opt = config.optimizer
    # The schedule horizon is always the configured run length, never the
    # early-stop point, so resumed runs see identical learning rates.
    result = train_loop(state, dataset, frac_split, config.augment, det_config,
                        target, config.eval_every, base_seed=seed,
                        on_eval=on_eval, best_val_map=best_val,
                        best_teacher=best_teacher,
                        lr_schedule=lambda it: scheduled_lr(
                            opt.learning_rate, it, config.total_iters,
                            opt.schedule, opt.final_lr_scale))

    if stop_at is not None and stop_at < config.total_iters:
        return _checkpoint_dict(state, result, curve_rows, seed,
                                base_elapsed + time.perf_counter() - t_start)

    test_table = evaluate_params(result.best_teacher, dataset, frac_split.test,
                                 det_config, state.config)
    test_row = _table_to_row(config, mode, fraction, seed, state.iteration,
                             test_table, class_names,
                             base_elapsed + time.perf_counter() - t_start)
    return RunOutput(curve_rows, test_row, result)


# ---------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------

def _checkpoint_dict(state: TeacherStudentState, result: TrainResult,
                     curve_rows, base_seed: int, elapsed: float) -> dict:
    return {
        "iteration": state.iteration,
        "base_seed": base_seed,
        "teacher": params_to_records(state.teacher),
        "student": params_to_records(state.student),
        "velocity": [[k, v.tolist(), list(v.shape)]
                     for k, v in state.optimizer.velocity.items()],
        "best_val_map": result.best_val_map,
        "best_teacher": params_to_records(result.best_teacher),
        "curve_rows": [row.__dict__ for row in curve_rows],
        "elapsed": elapsed,
    }


def _state_from_checkpoint(config: ExperimentConfig, ckpt: dict,
                           num_classes: int) -> tuple[TeacherStudentState, DetectorConfig]:
    det_config = detector_config_from(config, num_classes)
    st_cfg = replace(config.selftrain)
    teacher = params_from_records(ckpt["teacher"])
    student = params_from_records(ckpt["student"], requires_grad=True)
    opt = SGDState(config.optimizer.learning_rate, config.optimizer.momentum)
    opt.velocity = {k: np.array(v, dtype=np.float64).reshape(shape)
                    for k, v, shape in ckpt["velocity"]}
    state = TeacherStudentState(teacher, student, opt, st_cfg,
                                iteration=ckpt["iteration"])
    return state, det_config


def save_checkpoint(ckpt: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(ckpt, f)


def load_checkpoint(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------

def _format_row(row: MetricsRow) -> list[str]:
    return [row.mode, f"{row.fraction:g}", str(row.seed), str(row.iteration),
            f"{row.map_5095:.4f}", f"{row.map_50:.4f}",
            json.dumps(row.per_class, sort_keys=True),
            f"{row.seconds:.3f}"]


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(_format_row(row))


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [MetricsRow(m, float(fr), int(sd), int(it), float(a), float(b),
                           json.loads(pc), float(sec))
                for m, fr, sd, it, a, b, pc, sec in reader]


# ---------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------

def run_id(mode: str, fraction: float, seed: int) -> str:
    return f"{mode}_f{fraction:g}_s{seed}"


def sweep_grid(config: ExperimentConfig) -> list[tuple[str, float, int]]:
    grid = []
    for mode in config.modes:
        for fraction in config.fractions:
            for seed in config.seeds:
                grid.append((mode, fraction, seed))
    return grid


def run_sweep(config: ExperimentConfig, log=None) -> list[MetricsRow]:
    """Run the full (mode, fraction, seed) grid; persists per-run curve
    CSVs, run checkpoints, the sweep-level metrics CSV, summary tables,
    and training-curve SVGs under the configured output directory.
    """
    out_dir = config.resolved_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    dataset, split = build_dataset(config)
    test_rows: list[MetricsRow] = []
    for mode, fraction, seed in sweep_grid(config):
        rid = run_id(mode, fraction, seed)
        run_dir = os.path.join(out_dir, rid)
        os.makedirs(run_dir, exist_ok=True)
        out = run_single(config, mode, fraction, seed, dataset, split)
        write_metrics_csv(out.curve_rows, os.path.join(run_dir, "curve.csv"))
        ckpt = _checkpoint_dict(out.result.final_state, out.result,
                                out.curve_rows, seed, out.test_row.seconds)
        save_checkpoint(ckpt, os.path.join(run_dir, "checkpoint.json"))
        test_rows.append(out.test_row)
        if log is not None:
            log(f"{rid}: test mAP@[0.5:0.95]={out.test_row.map_5095:.2f} "
                f"mAP@0.5={out.test_row.map_50:.2f}")
    write_metrics_csv(test_rows, os.path.join(out_dir, "metrics.csv"))
    emit_report(test_rows, out_dir)
    return test_rows


# ---------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------

def summarize(rows: list[MetricsRow]):
    """(mode, fraction) -> (mean, sample stdev, n) of mAP@[0.5:0.95]."""
    groups: dict[tuple[str, float], list[float]] = {}
    for r in rows:
        groups.setdefault((r.mode, r.fraction), []).append(r.map_5095)
    out = {}
    for key, vals in groups.items():
        mean = sum(vals) / len(vals)
        sd = math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) \
            if len(vals) > 1 else 0.0
        out[key] = (mean, sd, len(vals))
    return out


def summary_table_text(rows: list[MetricsRow]) -> str:
    stats = summarize(rows)
    fractions = sorted({f for _, f in stats})
    modes = [m for m in ("supervised", "semi") if any(m == k[0] for k in stats)]
    buf = io.StringIO()
    header = ["Supervision type"] + [f"{f * 100:g}%" for f in fractions]
    widths = [18] + [16] * len(fractions)
    buf.write("Test mAP@[0.5:0.95], mean +/- stdev over seeds\n")
    buf.write("  ".join(h.ljust(w) for h, w in zip(header, widths)) + "\n")
    for mode in modes:
        cells = [mode.ljust(widths[0])]
        for f in fractions:
            if (mode, f) in stats:
                mean, sd, _ = stats[(mode, f)]
                cells.append(f"{mean:.2f} +/- {sd:.2f}".ljust(16))
            else:
                cells.append("-".ljust(16))
        buf.write("  ".join(cells) + "\n")
    return buf.getvalue()


def per_class_table(rows: list[MetricsRow], mode: str) -> tuple[list[str], list[list[str]]]:
    """Per-class AP (x100) by label fraction for one mode, seed-averaged."""
    sel = [r for r in rows if r.mode == mode]
    fractions = sorted({r.fraction for r in sel})
    class_names = sorted({name for r in sel for name in r.per_class})
    header = ["class"] + [f"{f * 100:g}%" for f in fractions]
    body = []
    for name in class_names:
        cells = [name]
        for f in fractions:
            vals = [r.per_class[name] for r in sel
                    if r.fraction == f and name in r.per_class]
            cells.append(f"{sum(vals) / len(vals):.2f}" if vals else "-")
        body.append(cells)
    return header, body


def plot_curve_svg(curve_rows: list[MetricsRow], path, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.fonttype"] = "path"  # self-contained SVG
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = [r.iteration for r in curve_rows]
    ax.plot(xs, [r.map_5095 for r in curve_rows], marker="o", label="mAP@[0.5:0.95]")
    ax.plot(xs, [r.map_50 for r in curve_rows], marker="s", label="mAP@0.5")
    ax.set_xlabel("iteration")
    ax.set_ylabel("validation mAP (x100)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_report(rows: list[MetricsRow], out_dir) -> None:
    """Summary table, per-class tables, and per-run curve SVGs."""
    if not rows:
        raise ValueError("no metrics rows to report")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(summary_table_text(rows))
    stats = summarize(rows)
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8",
              newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "fraction", "map_5095_mean", "map_5095_stdev", "n_seeds"])
        for (mode, fraction), (mean, sd, n) in sorted(stats.items()):
            writer.writerow([mode, f"{fraction:g}", f"{mean:.2f}", f"{sd:.2f}", n])
    for mode in sorted({r.mode for r in rows}):
        header, body = per_class_table(rows, mode)
        with open(os.path.join(out_dir, f"per_class_{mode}.csv"), "w",
                  encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(body)
    # training-curve SVGs from any per-run curve CSVs beneath out_dir
    for entry in sorted(os.listdir(out_dir)):
        curve_path = os.path.join(out_dir, entry, "curve.csv")
        if os.path.isfile(curve_path):
            curve = read_metrics_csv(curve_path)
            if curve:
                plot_curve_svg(curve, os.path.join(out_dir, entry, "curve.svg"),
                               entry)
