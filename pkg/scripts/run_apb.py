#!/usr/bin/env python3
"""Two-sensor A+B aggregation test with and without compensation."""
import sys
from pathlib import Path

from airfed.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "apb.json"

if __name__ == "__main__":
    sys.exit(main(["apb", "--config", str(CONFIG), *sys.argv[1:]]))
