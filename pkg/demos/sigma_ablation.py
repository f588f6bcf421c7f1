"""Point masks trained at a single noise level: large sigma favors the k-space center.

    python demos/sigma_ablation.py [--epochs 400]

Uses the exact score of a Gaussian mixture centered on 500 phantoms, so no
network training is needed. Each run takes a minute or two.
"""

import argparse

import numpy as np

from diffmask.masks import MaskParams, TrainConfig, learn_mask
from diffmask.mri import POINT
from diffmask.phantoms import make_dataset, random_phantoms
from diffmask.protocols import central_fraction
from diffmask.scores import GmmPrior

SHADES = " .:-=+*#%@"


def render(p):
    q = np.clip(p / p.max(), 0, 1)
    return "\n".join("".join(SHADES[int(v * (len(SHADES) - 1))] * 2 for v in row) for row in q)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    prior = GmmPrior.from_images(random_phantoms(500, seed=123), 0.01)
    train = make_dataset(seed=0).images("train")[:5]
    for sigma in (50.0, 0.5):
        cfg = TrainConfig(epochs=args.epochs, seed=args.seed, fixed_sigma=sigma)
        params = learn_mask(train, [], prior, MaskParams(POINT, 32, 32, 8, 4), cfg)
        print(f"sigma = {sigma:g}: {central_fraction(params):.2f} of the free budget in the central quarter")
        print(render(params.probs()))
        print()


if __name__ == "__main__":
    main()
