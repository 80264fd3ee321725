"""
Synergic nodule analysis - command line entry point

    python run.py phantom --n-sure 40 --n-unsure 60 --side 32 --seed 7 --out data
    python run.py train --data data --side 32 --epochs 5 --out runs/j
"""

import sys

from synergic.cli import run

if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
