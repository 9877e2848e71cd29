#!/usr/bin/env python3
"""Frame-detection probability sweep over SNR and sequence length."""
import sys
from pathlib import Path

from airfed.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "frame_timing.json"

if __name__ == "__main__":
    sys.exit(main(["frame-timing", "--config", str(CONFIG), *sys.argv[1:]]))
