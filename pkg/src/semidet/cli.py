"""Command-line interface: `semidet {generate,train,sweep,eval,report}`.

Any config key can be overridden with a dotted flag, e.g.
``--selftrain.tau 0.6`` or ``--fractions "[0.05, 0.1]"`` (values are
parsed as JSON where possible, otherwise taken as strings).
"""

import os

# Small desk-scale matmuls run faster single-threaded, and a fixed thread
# count keeps runs deterministic.  Must happen before numpy is imported.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402


def _parse_overrides(extras: list[str]) -> dict:
    overrides = {}
    i = 0
    while i < len(extras):
        arg = extras[i]
        if not arg.startswith("--"):
            raise SystemExit(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            i += 1
            if i >= len(extras):
                raise SystemExit(f"missing value for --{key}")
            raw = extras[i]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key] = value
        i += 1
    return overrides


def _load_config(args, extras):
    from .config import ConfigError, load_config

    try:
        return load_config(args.config, _parse_overrides(extras))
    except ConfigError as e:
        raise SystemExit(f"config error: {e}")


def cmd_generate(args, extras):
    from .data import dataset_to_coco, write_coco, write_image_cache
    from .harness import build_dataset

    config = _load_config(args, extras)
    dataset, _ = build_dataset(config)
    out = args.out or os.path.join(config.resolved_output_dir(), "dataset")
    os.makedirs(out, exist_ok=True)
    write_coco(dataset_to_coco(dataset), os.path.join(out, "annotations.json"))
    write_image_cache(dataset, out, fmt=config.dataset.image_cache)
    print(f"wrote {len(dataset.ids)} images to {out}")


def cmd_train(args, extras):
    from .harness import (build_dataset, load_checkpoint, run_id, run_single,
                          save_checkpoint, write_metrics_csv)

    config = _load_config(args, extras)
    dataset, split = build_dataset(config)
    resume = load_checkpoint(args.resume) if args.resume else None
    out = run_single(config, args.mode, args.fraction, args.seed,
                     dataset, split, stop_at=args.stop_at, resume=resume)
    run_dir = os.path.join(config.resolved_output_dir(),
                           run_id(args.mode, args.fraction, args.seed))
    os.makedirs(run_dir, exist_ok=True)
    if isinstance(out, dict):  # stopped early: checkpoint only
        save_checkpoint(out, os.path.join(run_dir, "checkpoint.json"))
        print(f"checkpoint at iteration {out['iteration']} -> {run_dir}")
        return
    write_metrics_csv(out.curve_rows, os.path.join(run_dir, "curve.csv"))
    write_metrics_csv([out.test_row], os.path.join(run_dir, "test.csv"))
    print(f"test mAP@[0.5:0.95]={out.test_row.map_5095:.2f} "
          f"mAP@0.5={out.test_row.map_50:.2f} ({run_dir})")


def cmd_sweep(args, extras):
    from .harness import run_sweep

    config = _load_config(args, extras)
    rows = run_sweep(config, log=print)
    print(f"wrote {len(rows)} runs to {config.resolved_output_dir()}")


def cmd_eval(args, extras):
    from .data import coco_boxes_by_image, read_coco
    from .evalmap import map_coco, read_results

    doc = read_coco(args.gt)
    gts = coco_boxes_by_image(doc)
    dets = read_results(args.results)
    class_ids = sorted(c["id"] - 1 for c in doc.categories)
    names = {c["id"] - 1: c["name"] for c in doc.categories}
    table = map_coco(dets, gts, class_ids)
    print(f"mAP@[0.5:0.95]: {table.map_5095 * 100:.2f}")
    print(f"mAP@0.5:       {table.map_50 * 100:.2f}")
    for cls, ap in sorted(table.per_class_5095.items()):
        print(f"  {names[cls]:<20s} {ap * 100:.2f}")


def cmd_report(args, extras):
    from .harness import emit_report, read_metrics_csv

    rows = read_metrics_csv(os.path.join(args.dir, "metrics.csv"))
    emit_report(rows, args.dir)
    print(f"report written to {args.dir}")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="semidet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config")
    p.add_argument("--mode", choices=["supervised", "semi"], default="semi")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stop-at", type=int, default=None,
                   help="stop early and write a checkpoint")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="run the full mode x fraction x seed grid")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="score a COCO result file against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--results", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="re-render summaries from metrics CSVs")
    p.add_argument("--dir", required=True)
    p.set_defaults(fn=cmd_report)

    args, extras = parser.parse_known_args(argv)
    args.fn(args, extras)


if __name__ == "__main__":
    sys.exit(main())
