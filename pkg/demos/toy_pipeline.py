#!/usr/bin/env python3
"""
End-to-end toy run: phantoms, two training stages, synthesis, metrics
---------------------------------------------------------------------
Stage 1 trains the VQ autoencoder (one shared encoder for CT, CBCT and the
high-pass CBCT) on reconstruction. Stage 2 freezes it and trains the latent
denoiser to predict the noise added to E(CT), conditioned on
[E(CBCT), E(HFE(CBCT))]. Synthesis starts from Gaussian latents and walks a
short DDIM subsequence down to step 0, then decodes.

The default configuration (200/50 slices, 60 + 200 epochs) takes about a
quarter of an hour on one core; --quick cuts the epochs to 20 + 80 (about
five minutes). That exercises the plumbing only: the denoiser is undertrained
and its sCT is not yet better than the raw CBCT.

Run:  python3 demos/toy_pipeline.py --out /tmp/hc3l_demo [--quick]
"""

import argparse
import logging
from pathlib import Path

from hc3ldiff import pipeline
from hc3ldiff.config import PipelineConfig

ap = argparse.ArgumentParser()
ap.add_argument("--out", type=Path, default=Path("/tmp/hc3l_demo"))
ap.add_argument("--quick", action="store_true")
ap.add_argument("--steps", type=int, default=20, help="DDIM steps at synthesis")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = PipelineConfig()
if args.quick:
    cfg = cfg.with_overrides(phantom={"n_test": 16}, training={"stage1_epochs": 20, "stage2_epochs": 80})
cfg = cfg.with_overrides(evaluation={"ddim_steps": args.steps})

report = pipeline.run_all(cfg, args.out, force=True)

print()
print(f"{'':10s} {'MAE (HU)':>9s} {'PSNR (dB)':>10s} {'SSIM':>7s}")
for name in ("cbct_vs_ct", "sct_vs_ct"):
    a = report["metrics"][name]["aggregate"]
    print(f"{name:10s} {a['mae']:9.1f} {a['psnr']:10.2f} {a['ssim']:7.4f}")
t = report["timing"]
print(f"synthesis: {t['slices']} slices, {t['ddim_steps']} DDIM steps, {t['synthesis_seconds_total']:.1f} s")
dose = report["dosimetry"]["sct_vs_ct"]
print("GPR sCT vs CT:", {k: round(v, 1) for k, v in dose["gpr_percent"].items() if v is not None})
print("artifacts in", args.out)
