#!/usr/bin/env python3
"""Train one configuration end to end and print test mAP.

Equivalent to `semidet train`:

    python scripts/quick_train.py --mode semi --fraction 0.1 --seed 0
    python scripts/quick_train.py --mode supervised --fraction 1.0 \
        --total_iters 1000 --eval_every 200
"""

import sys

from semidet.cli import main

if __name__ == "__main__":
    sys.exit(main(["train"] + sys.argv[1:]))
