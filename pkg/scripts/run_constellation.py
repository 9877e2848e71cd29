#!/usr/bin/env python3
"""Equalized 16-QAM constellation dump through the default channel."""
import sys
from pathlib import Path

from airfed.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "constellation.json"

if __name__ == "__main__":
    sys.exit(main(["constellation", "--config", str(CONFIG), *sys.argv[1:]]))
