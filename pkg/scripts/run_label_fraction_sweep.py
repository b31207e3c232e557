#!/usr/bin/env python3
"""Run the full mode x label-fraction x seed grid and write the report.

Equivalent to `semidet sweep`; any config key can be overridden with a
dotted flag, e.g.:

    python scripts/run_label_fraction_sweep.py --output_dir runs/full
    python scripts/run_label_fraction_sweep.py --config my.toml --seeds "[0]"
"""

import sys

from semidet.cli import main

if __name__ == "__main__":
    sys.exit(main(["sweep"] + sys.argv[1:]))
