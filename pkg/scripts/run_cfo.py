#!/usr/bin/env python3
"""Coarse CFO residual sweep and sequential tracking convergence."""
import sys
from pathlib import Path

from airfed.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "cfo.json"

if __name__ == "__main__":
    sys.exit(main(["cfo", "--config", str(CONFIG), *sys.argv[1:]]))
