"""Learn an R=8 column mask from five phantoms and compare it with equispaced sampling.

    python demos/line_mask_walkthrough.py [--checkpoint model.dmnet] [--epochs 400]

Without a checkpoint a conv denoiser is trained first (about two minutes).
"""

import argparse
import time

import numpy as np

from diffmask.denoiser import DenoiserNet, conv_image_preset, train_denoiser
from diffmask.masks import TrainConfig
from diffmask.mri import LINE
from diffmask.phantoms import make_dataset, random_phantoms
from diffmask.protocols import DESK_RHO, EvalConfig, train_and_compare
from diffmask.scores import SigmaSampler
from diffmask.tensor import make_rng


def columns(mask):
    return "".join("|" if k else "." for k in mask.keep)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint")
    ap.add_argument("--epochs", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.checkpoint:
        net = DenoiserNet.load(args.checkpoint)
    else:
        t = time.time()
        images = random_phantoms(500, seed=123)
        net = train_denoiser(images, SigmaSampler(), 20, 2e-3, make_rng(0), config=conv_image_preset((32, 32)), batch_size=16)
        print(f"denoiser trained in {time.time() - t:.0f} s, probe loss {net.history[0]:.1f} -> {net.history[-1]:.1f}")

    ds = make_dataset(seed=0)
    train = ds.images("train")[:5]
    tc = TrainConfig(epochs=args.epochs, seed=args.seed, val_every=40, val_rho=DESK_RHO)
    ec = EvalConfig(seed=1000 + args.seed)
    t = time.time()
    out = train_and_compare(net, train, ds.images("val"), ds.test, LINE, 8, tc, ec, ds.scaling)
    print(f"mask learned and evaluated in {time.time() - t:.0f} s")

    # the learned distribution piles its budget next to the calibration lines
    p = out["params"].probs()
    print("keep probabilities:", np.array2string(p, precision=2, max_line_width=120))
    for name in ("learned", "baseline"):
        rep = out[f"{name}_report"]
        (s, sd), (ps, _) = rep.ssim_stats, rep.psnr_stats
        print(f"{name:9s} {columns(out[name])}  R={out['R_' + name]:.0f}  SSIM {s:.3f} +- {sd:.3f}  PSNR {ps:.2f} dB")


if __name__ == "__main__":
    main()
