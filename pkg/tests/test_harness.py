"""Unit tests for config loading, metrics CSV, sweep plumbing, reports, CLI."""

import csv
import json
import os
from dataclasses import replace

import numpy as np
import pytest

from semidet.cli import main
from semidet.config import ConfigError, ExperimentConfig, load_config
from semidet.harness import (CSV_HEADER, MetricsRow, build_dataset,
                             emit_report, per_class_table, read_metrics_csv,
                             run_id, run_sweep, summarize, sweep_grid,
                             write_metrics_csv)


# ---------------------------------------------------------------------
# config
# ---------------------------------------------------------------------

def test_default_config_loads():
    cfg = load_config(None)
    assert cfg.total_iters == 4000
    assert cfg.fractions == (0.05, 0.1, 0.2, 0.5, 1.0)
    assert cfg.modes == ("supervised", "semi")


def test_unknown_key_reports_field_path(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[selftrain]\ntau = 0.5\ntua = 0.7\n")
    with pytest.raises(ConfigError, match="selftrain.tua"):
        load_config(str(path))


def test_wrong_type_rejected(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('total_iters = "many"\n')
    with pytest.raises(ConfigError, match="total_iters"):
        load_config(str(path))


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        load_config(None, {"fractions": [0.0, 0.5]})
    with pytest.raises(ConfigError):
        load_config(None, {"modes": ["supervised", "unsupervised"]})
    with pytest.raises(ConfigError):
        load_config(None, {"selftrain.alpha": 1.5})


def test_dotted_overrides():
    cfg = load_config(None, {"selftrain.tau": 0.6, "seeds": [7],
                             "dataset.image_count": 50})
    assert cfg.selftrain.tau == 0.6
    assert cfg.seeds == (7,)
    assert cfg.dataset.image_count == 50


def test_toml_round_trip(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(
        "total_iters = 100\nfractions = [0.1, 0.2]\n"
        "[dataset]\nimage_count = 40\n[optimizer]\nlearning_rate = 0.02\n")
    cfg = load_config(str(path))
    assert cfg.total_iters == 100
    assert cfg.fractions == (0.1, 0.2)
    assert cfg.dataset.image_count == 40
    assert cfg.optimizer.learning_rate == 0.02


# ---------------------------------------------------------------------
# metrics CSV
# ---------------------------------------------------------------------

ROWS = [
    MetricsRow("supervised", 0.1, 0, 4000, 52.1234, 88.5678,
               {"disc": 50.0, "bar": 54.25}, 61.125),
    MetricsRow("semi", 0.1, 1, 4000, 57.5, 90.0,
               {"disc": 55.0, "bar": 60.0}, 120.5),
]


def test_csv_header_exact(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(ROWS, path)
    with open(path, newline="") as f:
        header = next(csv.reader(f))
    assert header == ["mode", "fraction", "seed", "iteration", "map_5095",
                      "map_50", "per_class_json", "seconds"]
    assert header == CSV_HEADER


def test_csv_round_trip(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(ROWS, path)
    loaded = read_metrics_csv(path)
    assert loaded == ROWS


def test_csv_write_is_deterministic(tmp_path):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics_csv(ROWS, p1)
    write_metrics_csv(read_metrics_csv(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_csv_rejects_wrong_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("mode,fraction\nsemi,0.1\n")
    with pytest.raises(ValueError):
        read_metrics_csv(path)


# ---------------------------------------------------------------------
# sweep plumbing
# ---------------------------------------------------------------------

def test_run_id_format():
    assert run_id("semi", 0.05, 2) == "semi_f0.05_s2"


def test_sweep_grid_is_full_cartesian_product():
    cfg = ExperimentConfig(fractions=(0.05, 0.1, 0.2, 0.5),
                           modes=("supervised", "semi"), seeds=(0, 1, 2))
    grid = sweep_grid(cfg)
    assert len(grid) == 24
    assert len(set(grid)) == 24
    assert all(m in ("supervised", "semi") for m, _, _ in grid)


# ---------------------------------------------------------------------
# aggregation and reporting
# ---------------------------------------------------------------------

def _rows(values, mode="semi", fraction=0.1):
    return [MetricsRow(mode, fraction, s, 4000, v, v, {}, 1.0)
            for s, v in enumerate(values)]


def test_summary_mean_and_sample_stdev():
    stats = summarize(_rows([40.0, 50.0, 60.0]))
    mean, sd, n = stats[("semi", 0.1)]
    assert mean == pytest.approx(50.0)
    assert sd == pytest.approx(10.0)
    assert n == 3


def test_summary_single_row_has_zero_stdev():
    stats = summarize(_rows([42.0]))
    assert stats[("semi", 0.1)] == (42.0, 0.0, 1)


def test_summary_invariant_to_row_order():
    rows = _rows([40.0, 50.0, 60.0]) + _rows([10.0, 20.0], "supervised", 0.5)
    assert summarize(rows) == summarize(list(reversed(rows)))


def test_per_class_table_has_one_row_per_class():
    rows = [MetricsRow("semi", f, s, 4000, 50.0, 80.0,
                       {"disc": 40.0, "bar": 50.0, "ring": 60.0}, 1.0)
            for f in (0.1, 0.2) for s in (0, 1)]
    header, body = per_class_table(rows, "semi")
    assert header == ["class", "10%", "20%"]
    assert len(body) == 3
    assert [r[0] for r in body] == ["bar", "disc", "ring"]


def test_emit_report_writes_artifacts(tmp_path):
    rows = _rows([40.0, 50.0]) + _rows([30.0, 35.0], "supervised", 0.1)
    emit_report(rows, tmp_path)
    assert (tmp_path / "summary.txt").is_file()
    assert (tmp_path / "summary.csv").is_file()
    assert (tmp_path / "per_class_semi.csv").is_file()
    assert (tmp_path / "per_class_supervised.csv").is_file()


def test_emit_report_rejects_empty():
    with pytest.raises(ValueError):
        emit_report([], "/tmp/nowhere")


# ---------------------------------------------------------------------
# tiny end-to-end sweep
# ---------------------------------------------------------------------

TINY = {
    "dataset.image_count": 30,
    "dataset.clutter_density": 3.0,
    "total_iters": 20,
    "eval_every": 10,
    "fractions": [0.5],
    "modes": ["supervised"],
    "seeds": [0],
    "selftrain.burn_in_iters": 5,
}


def test_tiny_sweep_rerun_is_byte_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("SEMIDET_OUTPUT_ROOT", str(tmp_path))
    cfg = load_config(None, dict(TINY, **{"record_timing": False,
                                          "output_dir": "r1"}))
    run_sweep(cfg)
    cfg2 = load_config(None, dict(TINY, **{"record_timing": False,
                                           "output_dir": "r2"}))
    run_sweep(cfg2)
    b1 = (tmp_path / "r1" / "metrics.csv").read_bytes()
    b2 = (tmp_path / "r2" / "metrics.csv").read_bytes()
    assert b1 == b2
    assert (tmp_path / "r1" / "supervised_f0.5_s0" / "curve.svg").is_file()


# ---------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------

def test_cli_generate(tmp_path):
    main(["generate", "--out", str(tmp_path / "ds"),
          "--dataset.image_count", "10", "--dataset.clutter_density", "3.0"])
    assert (tmp_path / "ds" / "annotations.json").is_file()
    assert (tmp_path / "ds" / "images.npz").is_file()


def test_cli_eval(tmp_path, capsys):
    from semidet.data import (dataset_to_coco, generate_dataset,
                              three_class_spec, write_coco)
    from semidet.boxes import Box
    from semidet.evalmap import write_results

    ds = generate_dataset(three_class_spec(clutter_density=3.0), 3, seed=5)
    gt_path = tmp_path / "gt.json"
    write_coco(dataset_to_coco(ds), gt_path)
    dets = {i: [Box(b.x_min, b.y_min, b.x_max, b.y_max, b.class_id, 0.9)
                for b in ds.boxes[i]] for i in ds.ids}
    res_path = tmp_path / "res.json"
    write_results(dets, res_path)
    main(["eval", "--gt", str(gt_path), "--results", str(res_path)])
    out = capsys.readouterr().out
    assert "mAP@[0.5:0.95]: 100.00" in out


def test_cli_report(tmp_path):
    write_metrics_csv(_rows([40.0, 50.0]), tmp_path / "metrics.csv")
    main(["report", "--dir", str(tmp_path)])
    assert (tmp_path / "summary.txt").is_file()


def test_cli_rejects_bad_override(tmp_path):
    with pytest.raises(SystemExit):
        main(["generate", "--out", str(tmp_path), "--dataset.imlage_count", "5"])


def test_build_dataset_split_sizes():
    cfg = load_config(None, {"dataset.image_count": 100,
                             "dataset.clutter_density": 3.0})
    dataset, split = build_dataset(cfg)
    assert len(dataset.ids) == 100
    assert (len(split.train), len(split.val), len(split.test)) == (65, 20, 15)
