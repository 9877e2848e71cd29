#!/usr/bin/env python3
"""Run every scenario with its default config; stop on the first failure."""
import sys
from pathlib import Path

from airfed.cli import main

ORDER = [
    ("frame-timing", "frame_timing.json"),
    ("cfo", "cfo.json"),
    ("constellation", "constellation.json"),
    ("apb", "apb.json"),
    ("e2e", "e2e.json"),
    ("train", "train.json"),
]

if __name__ == "__main__":
    base = Path(__file__).resolve().parents[1] / "configs"
    for scenario, config in ORDER:
        print(f"=== {scenario} ===")
        rc = main([scenario, "--config", str(base / config), *sys.argv[1:]])
        if rc != 0:
            sys.exit(rc)
    sys.exit(0)
