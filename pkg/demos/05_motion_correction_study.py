#!/usr/bin/env python3
"""Motion correction on a drifting synthetic time series.

Simulates a slowly moving head over a short functional acquisition, corrupts
each frame with its own rigid pose, corrects every frame by resampling through
the inverse of the predicted pose, and compares voxel time courses before and
after.  With the oracle predictor the correction is limited only by
interpolation; swap in a trained checkpoint to see the learned version.
"""

import argparse
from pathlib import Path

import numpy as np

from svrkit.dataio import make_phantom_series
from svrkit.evaluation import motion_study, pick_rois
from svrkit.network import load_checkpoint


def main():
    cli = argparse.ArgumentParser()
    cli.add_argument("--checkpoint", help="trained model; defaults to the oracle")
    cli.add_argument("--frames", type=int, default=24)
    cli.add_argument("--out", default="demo_motion_study")
    args = cli.parse_args()

    series = make_phantom_series((24, 32, 32), rng_seed=5, length=args.frames,
                                 drift_amplitude=0.04, smooth_sigma=2.5)
    predictor = "oracle"
    if args.checkpoint:
        predictor, _ = load_checkpoint(args.checkpoint)
    rois = pick_rois(series[0], count=2, box=6)

    out = Path(args.out)
    study = motion_study(series, predictor, rois=rois, rng_seed=0, out_dir=out)

    print(f"{study.n_frames} frames, ROIs at {[tuple(lo for lo, _ in r) for r in rois]}")
    frac = study.variance_reduction_fraction()
    print(f"voxels with reduced temporal variance after correction: {frac:.1%}")

    for j, (free, before, after) in enumerate(
        zip(study.free, study.before, study.after)
    ):
        v_before = before.var(axis=0).mean()
        v_after = after.var(axis=0).mean()
        drift = np.abs(after - free).max()
        print(f"  ROI {j}: mean temporal variance {v_before:.5f} -> {v_after:.5f}, "
              f"worst deviation from the motion-free series {drift:.4f}")

    print(f"\ntime-course plots and per-voxel tables written to {out}/")


if __name__ == "__main__":
    main()
