#!/usr/bin/env python3
"""Short diagnostic handshake exposing per-round estimator trajectories."""
import sys
from pathlib import Path

from airfed.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "e2e.json"

if __name__ == "__main__":
    sys.exit(main(["e2e", "--config", str(CONFIG), *sys.argv[1:]]))
