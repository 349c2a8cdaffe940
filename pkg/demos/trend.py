"""Baseline (timing inputs ablated) versus timing-conditioned model, end to end through the CLI.

Usage: python3 demos/trend.py OUT_DIR   (roughly 15 minutes on one core)
"""

import sys
from pathlib import Path

from isochrony_st.cli import main

configs = Path(__file__).resolve().parent.parent / "configs"
out = sys.argv[1] if len(sys.argv) > 1 else "trend-run"
sys.exit(main(["repro-trend", "--out", out, "--corpus-config", str(configs / "trend_corpus.cfg"),
               "--model-config", str(configs / "trend_model.cfg"),
               "--train-config", str(configs / "trend_train.cfg")]))
