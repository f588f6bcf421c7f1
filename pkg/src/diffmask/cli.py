"""Command-line driver: data generation, score training, mask learning, reconstruction, evaluation.

Every run writes into a fresh directory ``<root>/<name>`` where the root is
``--out``, else ``$DIFFMASK_OUT``, else ``./runs``, and the name defaults to
the subcommand. The first file written is ``config.json`` holding the
resolved arguments; ``diffmask replay <config.json>`` reruns from it alone.
Existing non-empty run directories are never overwritten.

CSV schemas
  train-score  loss.csv        epoch, probe_loss
  learn-mask   train_log.csv   iteration, loss, epoch, val_error
  reconstruct  metrics.csv     image_id, mask_id, R, ssim, psnr
  evaluate     aggregate.csv   mask_id, pattern, R, steps, rho, s_churn,
  sweep                        n_images, ssim_mean, ssim_std, psnr_mean, psnr_std
"""

import argparse
import csv
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .denoiser import DenoiserConfig, DenoiserNet, conv_image_preset, train_denoiser
from .masks import MaskParams, TrainConfig, learn_mask, load_theta, sample_mask, save_theta, write_train_log
from .metrics import PSNR_CAP, write_metrics
from .mri import LINE, POINT, BinaryMask, acceleration, load_mask, save_mask, sites_to_grid
from .phantoms import Dataset, PhantomSpec, ScaleRecord, load_image, make_dataset, random_phantoms, save_image, unscale
from .protocols import DESK_ACS, DESK_RHO, EvalConfig, baseline_mask, desk_coils, evaluate_mask, learned_mask
from .scores import GmmPrior, SigmaSampler
from .tensor import make_rng

OUT_ENV = "DIFFMASK_OUT"
MANIFEST = "manifest.json"
CONFIG = "config.json"
SPLITS = ("train", "val", "test")
PATTERNS = {"line": LINE, "point": POINT}


class CliError(Exception):
    pass


# pgm -------------------------------------------------------------------------
def write_pgm(img, path, lo=None, hi=None, comments=()):
    """8-bit binary PGM (P5) of a real image, linearly windowed to [lo, hi]; the window is recorded."""
    img = np.asarray(img, dtype=float)
    lo = float(img.min()) if lo is None else float(lo)
    hi = float(img.max()) if hi is None else float(hi)
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    px = np.clip(np.round((img - lo) * scale), 0, 255).astype(np.uint8)
    notes = [*comments, f"window {lo!r} {hi!r}"]
    head = "P5\n" + "".join(f"# {c}\n" for c in notes) + f"{img.shape[1]} {img.shape[0]}\n255\n"
    Path(path).write_bytes(head.encode() + px.tobytes())


def read_pgm(path):
    """(pixels, comment lines) of a P5 file as written by :func:`write_pgm`."""
    data = Path(path).read_bytes()
    comments, fields, off = [], [], 0
    while len(fields) < 4:
        end = data.index(b"\n", off)
        line = data[off:end].decode("ascii")
        off = end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            fields.extend(line.split())
    if fields[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data, np.uint8, h * w, off).reshape(h, w), comments


# run directories and data ------------------------------------------------------
def run_dir(args):
    root = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    path = root / (args.name or args.command)
    if path.exists() and any(path.iterdir()):
        raise CliError(f"run directory {path} already exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    (path / CONFIG).write_text(json.dumps({"version": __version__, "args": cfg}, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(root):
    root = Path(root)
    mf = root / MANIFEST
    if not mf.is_file():
        raise CliError(f"no {MANIFEST} in {root}")
    man = json.loads(mf.read_text())
    ds = Dataset()
    for split in SPLITS:
        for iid in man["splits"][split]:
            getattr(ds, split).append((iid, load_image(root / man["files"][iid])))
            ds.scaling[iid] = ScaleRecord(*man["scaling"][iid])
    return ds


def load_score(args, ds):
    if args.score == "checkpoint":
        if not args.checkpoint:
            raise CliError("--score checkpoint needs --checkpoint PATH")
        if not Path(args.checkpoint).is_file():
            raise CliError(f"checkpoint {args.checkpoint} not found")
        return DenoiserNet.load(args.checkpoint)
    train = ds.images("train")
    if not train:
        raise CliError("the GMM score needs a nonempty train split")
    return GmmPrior.from_images(train, args.gmm_variance)


def eval_config(args, steps=None, rho=None, s_churn=None):
    return EvalConfig(
        steps=args.steps if steps is None else steps,
        rho=args.rho if rho is None else rho,
        s_churn=args.s_churn if s_churn is None else s_churn,
        seed=args.seed,
        coils=args.coils,
    )


def resolve_mask(spec, ds, seed):
    """A mask file, or ``full-line`` / ``full-point`` for the fully sampled pattern."""
    h, w = ds.test[0][1].shape if ds.test else ds.train[0][1].shape
    if spec in ("full-line", "full-point"):
        return BinaryMask.full(PATTERNS[spec[5:]], h, w), spec
    path = Path(spec)
    if not path.is_file():
        raise CliError(f"mask file {spec} not found")
    if path.suffix == ".bin":
        params = load_theta(path)
        base = baseline_mask(params.kind, params.h, params.w, params.target_R, params.acs_width, seed)
        return learned_mask(params, base.n_kept), path.stem
    return load_mask(path), path.stem


# subcommands -------------------------------------------------------------------
def cmd_gen_data(args):
    out = run_dir(args)
    spec = PhantomSpec(h=args.h, w=args.w, n_ellipses=(args.min_ellipses, args.max_ellipses))
    ds = make_dataset(spec, args.n_train, args.n_val, args.n_test, args.seed)
    (out / "images").mkdir()
    man = {"seed": args.seed, "spec": vars(spec), "splits": {}, "files": {}, "scaling": {}}
    for split in SPLITS:
        man["splits"][split] = [iid for iid, _ in getattr(ds, split)]
        for iid, img in getattr(ds, split):
            rel = f"images/{iid}.cimg"
            save_image(img, out / rel)
            man["files"][iid] = rel
            rec = ds.scaling[iid]
            man["scaling"][iid] = [rec.lo, rec.hi]
    (out / MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    print(f"wrote {sum(len(v) for v in man['splits'].values())} images to {out}")
    return out


def cmd_train_score(args):
    if args.data:
        images = load_dataset(args.data).images("train")
    else:
        images = random_phantoms(args.n_images, PhantomSpec(h=args.h, w=args.w), args.data_seed)
    if not images:
        raise CliError("no training images")
    out = run_dir(args)
    shape = images[0].shape
    if args.arch == "conv":
        config = conv_image_preset(shape)
    else:
        config = DenoiserConfig(shape, True, hidden=tuple(args.hidden))
    rng = make_rng(args.seed)
    net = train_denoiser(images, SigmaSampler(), args.epochs, args.lr, rng, config=config, batch_size=args.batch_size)
    net.save(out / "model.dmnet")
    with open(out / "loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "probe_loss"])
        for i, v in enumerate(net.history):
            w.writerow([i, repr(float(v))])
    print(f"probe loss {net.history[0]:.4g} -> {net.history[-1]:.4g}; checkpoint in {out}")
    return out


def cmd_learn_mask(args):
    ds = load_dataset(args.data)
    score = load_score(args, ds)
    kind = PATTERNS[args.pattern]
    train = ds.images("train")[: args.n_train] if args.n_train else ds.images("train")
    val = ds.images("val")
    h, w = train[0].shape
    acs = DESK_ACS[kind] if args.acs is None else args.acs
    out = run_dir(args)
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        gamma=args.gamma,
        tau=args.tau,
        fixed_sigma=args.fixed_sigma,
        seed=args.seed,
        val_every=args.val_every,
        val_steps=args.val_steps,
        val_rho=args.rho,
    )
    coils = desk_coils(h, w, EvalConfig(seed=args.seed, coils=args.coils))
    log = []
    params = learn_mask(train, val, score, MaskParams(kind, h, w, args.R, acs, args.tau), cfg, coils, log)
    save_theta(params, out / "theta.bin")
    write_train_log(log, out / "train_log.csv")
    hard = sample_mask(params, make_rng(args.seed))
    save_mask(hard, out / "mask.txt")
    probs = params.probs()
    grid = np.array(sites_to_grid(kind, h, probs))
    write_pgm(
        grid,
        out / "probs.pgm",
        0.0,
        1.0,
        comments=[
            f"pattern {kind}",
            f"target_R {args.R!r}",
            f"expected_R {1.0 / float(probs.mean())!r}",
            f"sampled_R {acceleration(hard)!r}",
        ],
    )
    print(f"learned {kind} mask, sampled R = {acceleration(hard):.3f}; files in {out}")
    return out


def cmd_reconstruct(args):
    ds = load_dataset(args.data)
    items = getattr(ds, args.split)[: args.limit] if args.limit else getattr(ds, args.split)
    if not items:
        raise CliError(f"the {args.split} split is empty")
    mask, mask_id = resolve_mask(args.mask, ds, args.seed)
    score = load_score(args, ds)
    out = run_dir(args)
    cfg = eval_config(args)
    _, rows, recons = evaluate_mask(score, items, mask, cfg, ds.scaling, keep_recons=True)
    (out / "recon").mkdir()
    R = acceleration(mask)
    for (iid, x), rec in zip(items, recons):
        save_image(rec, out / "recon" / f"{iid}.cimg")
        ref = np.abs(unscale(x, ds.scaling[iid]))
        mag = np.abs(unscale(rec, ds.scaling[iid]))
        peak = float(ref.max())
        write_pgm(mag, out / "recon" / f"{iid}.pgm", 0.0, peak)
        write_pgm(4.0 * np.abs(mag - ref), out / "recon" / f"{iid}_residual_x4.pgm", 0.0, peak, ["residual x4"])
    write_metrics([(iid, mask_id, R, s, p) for iid, s, p in rows], out / "metrics.csv")
    ssims = [s for _, s, _ in rows]
    print(f"{len(rows)} reconstructions, mean SSIM {np.mean(ssims):.4f}; files in {out}")
    return out


AGG_HEADER = ["mask_id", "pattern", "R", "steps", "rho", "s_churn", "n_images", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std"]


def _masks_for(args, ds):
    h, w = (ds.test[0][1] if ds.test else ds.train[0][1]).shape
    masks = [resolve_mask(m, ds, args.seed) for m in args.mask or []]
    for name in args.baseline or []:
        kind = LINE if name == "equispaced" else POINT
        acs = DESK_ACS[kind] if args.acs is None else args.acs
        for R in args.R or []:
            masks.append((baseline_mask(kind, h, w, R, acs, args.seed), f"{name}-R{R:g}"))
    if not masks:
        raise CliError("give at least one --mask or a --baseline with --R values")
    return masks


def sweep_grid(args):
    """Cartesian product of the per-knob value lists."""
    return list(itertools.product(args.steps, args.rho, args.s_churn))


def cmd_sweep(args):
    ds = load_dataset(args.data)
    if not ds.test:
        raise CliError("the test split is empty")
    masks = _masks_for(args, ds)
    score = load_score(args, ds)
    out = run_dir(args)
    rows = []
    for (mask, mask_id), (steps, rho, churn) in itertools.product(masks, sweep_grid(args)):
        rep = evaluate_mask(score, ds.test, mask, eval_config(args, steps, rho, churn), ds.scaling)[0]
        (sm, ss), (pm, ps) = rep.ssim_stats, rep.psnr_stats
        rows.append([mask_id, mask.kind, acceleration(mask), steps, rho, churn, len(rep.ssim), sm, ss, min(pm, PSNR_CAP), ps])
    with open(out / "aggregate.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(AGG_HEADER)
        w.writerows(rows)
    print(f"{len(rows)} rows written to {out / 'aggregate.csv'}")
    return out


def cmd_replay(args):
    saved = json.loads(Path(args.config).read_text())["args"]
    saved["out"] = args.out
    saved["name"] = args.name or f"{saved.get('name') or saved['command']}-replay"
    if saved["command"] not in COMMANDS:
        raise CliError(f"cannot replay {saved['command']!r}")
    ns = argparse.Namespace(**saved)
    return COMMANDS[ns.command](ns)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-score": cmd_train_score,
    "learn-mask": cmd_learn_mask,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_sweep,
    "sweep": cmd_sweep,
}


# parser ------------------------------------------------------------------------
def _floats(s):
    return [float(v) for v in s.split(",")]


def _ints(s):
    return [int(v) for v in s.split(",")]


def _common(p, seed=0):
    p.add_argument("--out", default=None, help=f"output root (default ${OUT_ENV} or ./runs)")
    p.add_argument("--name", default=None, help="run directory name (default: the subcommand)")
    p.add_argument("--seed", type=int, default=seed)


def _score_flags(p):
    p.add_argument("--score", choices=("gmm", "checkpoint"), default="checkpoint")
    p.add_argument("--checkpoint", default=None, help="denoiser checkpoint from train-score")
    p.add_argument("--gmm-variance", type=float, default=0.01, help="component variance of the GMM prior")


def _sampler_flags(p, multi=False):
    if multi:
        p.add_argument("--steps", type=_ints, default=[100], help="comma-separated list")
        p.add_argument("--rho", type=_floats, default=[DESK_RHO], help="comma-separated list")
        p.add_argument("--s-churn", type=_floats, default=[0.0], help="comma-separated list")
    else:
        p.add_argument("--steps", type=int, default=100)
        p.add_argument("--rho", type=float, default=DESK_RHO)
        p.add_argument("--s-churn", type=float, default=0.0)
    p.add_argument("--coils", type=int, default=4)


def build_parser():
    ap = argparse.ArgumentParser(prog="diffmask", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthetic phantom splits and manifest")
    _common(p)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-val", type=int, default=5)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--min-ellipses", type=int, default=3)
    p.add_argument("--max-ellipses", type=int, default=6)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-score", help="fit the toy denoiser by denoising score matching")
    _common(p)
    p.add_argument("--data", default=None, help="gen-data run to train on (default: fresh phantoms)")
    p.add_argument("--n-images", type=int, default=500)
    p.add_argument("--data-seed", type=int, default=123)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--arch", choices=("conv", "mlp"), default="conv")
    p.add_argument("--hidden", type=_ints, default=[64, 64], help="MLP hidden widths")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_train_score)

    p = sub.add_parser("learn-mask", help="learn a k-space sampling distribution")
    _common(p)
    p.add_argument("--data", required=True)
    _score_flags(p)
    p.add_argument("--pattern", choices=tuple(PATTERNS), default="line")
    p.add_argument("--R", type=float, default=8.0)
    p.add_argument("--acs", type=int, default=None, help="calibration width (default 2 for line, 4 for point)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--fixed-sigma", type=float, default=None)
    p.add_argument("--n-train", type=int, default=None, help="use only the first N training images")
    p.add_argument("--val-every", type=int, default=1)
    p.add_argument("--val-steps", type=int, default=100)
    p.add_argument("--rho", type=float, default=DESK_RHO, help="DPS scale for validation")
    p.add_argument("--coils", type=int, default=4)
    p.set_defaults(func=cmd_learn_mask)

    p = sub.add_parser("reconstruct", help="posterior-sample reconstructions under one mask")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", required=True, help="mask file, theta.bin, full-line or full-point")
    _score_flags(p)
    _sampler_flags(p)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_reconstruct)

    for name, multi in (("evaluate", False), ("sweep", True)):
        p = sub.add_parser(name, help="aggregate metrics per mask" + (" over a config grid" if multi else ""))
        _common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--mask", action="append", help="mask file, theta.bin, full-line or full-point (repeatable)")
        p.add_argument("--baseline", action="append", choices=("equispaced", "poisson"))
        p.add_argument("--R", type=_floats, default=None, help="comma-separated accelerations for baselines")
        p.add_argument("--acs", type=int, default=None)
        _score_flags(p)
        _sampler_flags(p, multi=True)
        p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="rerun a subcommand from its config.json")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, FileNotFoundError, ValueError) as exc:
        print(f"diffmask: error: {exc}", file=sys.stderr)
        return 2
    return 0
