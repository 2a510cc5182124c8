"""Run the margin sweep through the command-line entry point.

Every grid point trains and evaluates a fresh model and the sweep prints one
row per margin. Steps are kept tiny here so the whole grid finishes quickly;
the numbers only show the table's shape.

    python3 demos/04_margin_sweep.py [out_dir]
"""
import sys
from pathlib import Path

from dfscad.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/sweep")
out.mkdir(parents=True, exist_ok=True)
(out / "run.txt").write_text(
    "# settings shared by every sweep point\n"
    "profile = fast\n"
    "iterations = 60\n"
    "lr = 0.001\n"
)
(out / "spec.txt").write_text("canvas = 64\nn_train = 20\nn_validation = 10\nn_test_good = 10\n"
                              "n_logical = 10\nn_structural = 10\n")

code = main(["gen-data", "--spec", str(out / "spec.txt"), "--out", str(out / "data")])
code = code or main(["sweep", "--axis", "margin", "--config", str(out / "run.txt"),
                     "--data", str(out / "data"), "--out", str(out / "margin")])
print(f"\nper-point reports and resolved configs are under {out / 'margin'}")
sys.exit(code)
