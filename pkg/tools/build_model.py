"""Regenerate the bundled robot model file (DH rows, limits, surface samples)."""

import sys
from pathlib import Path

from reactive_control.model import build_bundled_model, save_model

if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "src/reactive_control/data/robot_model.yaml"
    save_model(build_bundled_model(), out)
    print(f"wrote {out}")
