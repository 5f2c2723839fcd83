"""Small RD study: baseline vs refinement on one short clip.

A 16-frame clip with 30 iterations per frame keeps this to a minute or two.
The acceptance run uses 96 frames and 100 iterations.
Run: python3 demos/04_rd_curves.py [out_dir]
"""
# %%
import os
import sys

from nvclab.codec import default_model
from nvclab.harness import curve_from_report, run_eval
from nvclab.metrics import write_curve_csv

out = sys.argv[1] if len(sys.argv) > 1 else "demo_rd"
cache = os.environ.get("NVCLAB_CACHE", os.path.expanduser("~/.cache/nvclab"))
model = default_model(cache_dir=cache)

job = {
    "name": "demo",
    "sequences": [{"name": "clip", "seed": 3, "width": 64, "height": 64, "frames": 16,
                   "motion": "mixed"}],
    "modes": ["baseline", "refine_only", "refine_dynamic"],
    "max_iters": 30,
    "frames_to_code": 16,
    "intra_period": 16,
    "out_dir": out,
}
report = run_eval(job, model)

# %% the curves, then BD-rate against the baseline
entry = report["sequences"]["clip"]
for mode, curve in entry["curves"].items():
    pts = "  ".join(f"{r:.3f}/{q:.2f}" for r, q in zip(curve["bpp"], curve["psnr"]))
    print(f"{mode:<15} bpp/PSNR  {pts}")
    write_curve_csv(curve_from_report(curve, mode), os.path.join(out, f"curve_{mode}.csv"))
for mode, value in entry["bd_rate"].items():
    print(f"BD-rate {mode}: {value:+.2f}%")

# `nvclab bdrate demo_rd/curve_baseline.csv demo_rd/curve_refine_dynamic.csv` gives the same number
