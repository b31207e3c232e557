#!/usr/bin/env python3
"""Generate a synthetic scene dataset (COCO annotations + image cache).

Equivalent to `semidet generate`:

    python scripts/generate_dataset.py --out data/three_class
    python scripts/generate_dataset.py --out data/tail \
        --dataset.preset twelve_class --dataset.image_count 1304
"""

import sys

from semidet.cli import main

if __name__ == "__main__":
    sys.exit(main(["generate"] + sys.argv[1:]))
