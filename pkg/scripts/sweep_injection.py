"""Edit one procedural scene under a grid of injection durations and blend
thresholds; prints PSNR to the source and mask IoU per setting.

    python scripts/sweep_injection.py --seed 0 --target "a blue square moving right"
"""
import argparse
import dataclasses
import itertools

from videdit import pipeline
from videdit.blending import upsample_mask
from videdit.config import load_config
from videdit.metrics import mask_iou, psnr


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--target", default="a blue square moving right")
    ap.add_argument("--config")
    ap.add_argument("--cross", type=float, nargs="+", default=[0.0, 0.2, 0.5])
    ap.add_argument("--st", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    ap.add_argument("--tau", type=float, nargs="+", default=[0.25])
    args = ap.parse_args()
    config = load_config(args.config, {"seed": args.seed, "target_prompt": args.target})
    session = pipeline.prepare(config)
    print("dur_cross,dur_st,tau,psnr,mask_iou")
    for cross, st, tau in itertools.product(args.cross, args.st, args.tau):
        inj = dataclasses.replace(config.injection(), dur_cross=cross, dur_st=st, blend_threshold=tau)
        res = pipeline.edit_sample(session, args.target, injection=inj)
        frames = pipeline.to_frames(res.edited)
        up = upsample_mask(res.final_mask, tuple(session.truth_masks.shape[-2:])).numpy()
        print(f"{cross},{st},{tau},{psnr(frames, session.frames):.3f},{mask_iou(up, session.truth_masks):.3f}")


if __name__ == "__main__":
    main()
