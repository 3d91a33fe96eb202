"""
SOP command line entry point

Usage:
    python sop.py gen-data --classes 10 --per-class 200 --out data/synthetic.sopd
    python sop.py train --config config.json --data data/synthetic.sopd --out runs/sop
    python sop.py eval --ckpt runs/sop/checkpoints/step_002000 --data data/synthetic.sopd
    python sop.py ablate --grid grid.json --data data/synthetic.sopd --out runs/ablate
"""
import sys

from app.cli import main

if __name__ == '__main__':
    sys.exit(main())
