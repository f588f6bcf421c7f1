"""Desk-scale experiment protocols shared by the CLI, demos and acceptance tests.

Reconstructions are compared with their references after undoing the
[-1, 1] scaling, so metrics see the phantom's own intensities rather than
the constant offset the scaling adds to the background.
"""

from dataclasses import dataclass, replace

import numpy as np

from .baselines import equispaced_mask, poisson_disc_mask
from .masks import MaskParams, learn_mask, top_mask
from .metrics import MetricReport, psnr, ssim
from .mri import LINE, POINT, acceleration, acs_sites, forward, make_coils, site_shape
from .phantoms import unscale
from .posterior import SamplerConfig, sample_posterior
from .tensor import make_rng

# calibration widths for 32x32 images; the full-size value of 16 would use
# up the whole sampling budget of an R=8 LINE mask on 32 columns
DESK_ACS = {LINE: 2, POINT: 4}
DESK_RHO = 1.0
COIL_SEED_OFFSET = 104_729


@dataclass(frozen=True)
class EvalConfig:
    steps: int = 100
    rho: float = DESK_RHO
    s_churn: float = 0.0
    seed: int = 0
    coils: int = 4


def desk_coils(h, w, cfg):
    """Coil maps drawn from a seed derived from ``cfg.seed`` (one set per evaluation)."""
    return make_coils(h, w, cfg.coils, make_rng(cfg.seed + COIL_SEED_OFFSET))


def reconstruct(score, x, mask, coils, cfg, index=0):
    """Noise-free multi-coil measurement of ``x`` and one posterior sample."""
    y = forward(x, coils, mask)
    scfg = SamplerConfig(steps=cfg.steps, rho=cfg.rho, s_churn=cfg.s_churn, seed=cfg.seed + index)
    return sample_posterior(score, y, coils, scfg)


def image_metrics(x, rec, record=None):
    """(SSIM, PSNR) of ``rec`` against ``x``, after unscaling both when a record is given."""
    if record is not None:
        x, rec = unscale(x, record), unscale(rec, record)
    return ssim(x, rec), psnr(x, rec)


def evaluate_mask(score, items, mask, cfg, scaling=None, keep_recons=False):
    """Reconstruct every ``(id, image)`` in ``items`` under ``mask``.

    Returns a MetricReport, the per-image rows ``(id, ssim, psnr)`` and,
    if asked, the reconstructions in input order.
    """
    if not items:
        raise ValueError("nothing to evaluate")
    h, w = items[0][1].shape
    coils = desk_coils(h, w, cfg)
    report, rows, recons = MetricReport(), [], []
    for i, (iid, x) in enumerate(items):
        rec = reconstruct(score, x, mask, coils, cfg, i)
        s, p = image_metrics(x, rec, None if scaling is None else scaling.get(iid))
        report.ssim.append(s)
        report.psnr.append(p)
        rows.append((iid, s, p))
        if keep_recons:
            recons.append(rec)
    return report, rows, recons


def baseline_mask(kind, h, w, R, acs_width, seed=0):
    if kind == LINE:
        return equispaced_mask(w, R, acs_width, h=h)
    return poisson_disc_mask(h, w, R, acs_width, make_rng(seed))


def learned_mask(params, budget):
    """Deterministic evaluation mask: the ``budget`` most probable sites."""
    return top_mask(params, budget)


def central_fraction(params):
    """Share of the non-calibration keep-probability inside the central quarter of k-space.

    The central quarter is the centered block covering a quarter of the
    sites: H/2 x W/2 pixels for POINT patterns, W/4 columns for LINE.
    """
    p = params.probs()
    shape = site_shape(params.kind, params.h, params.w)
    center = np.zeros(shape, dtype=bool)
    if params.kind == LINE:
        w = params.w
        c0 = w // 2 - w // 8
        center[c0 : c0 + w // 4] = True
    else:
        h, w = params.h, params.w
        r0, c0 = h // 2 - h // 4, w // 2 - w // 4
        center[r0 : r0 + h // 2, c0 : c0 + w // 2] = True
    free = ~acs_sites(params.kind, params.h, params.w, params.acs_width)
    return float(p[center & free].sum() / p[free].sum())


def train_and_compare(score, train_items, val_items, test_items, kind, R, train_cfg, eval_cfg, scaling=None, acs_width=None):
    """Learn a mask, then evaluate it against the matching baseline at the same kept-site budget.

    Returns a dict with the learned parameters, both masks and both reports.
    """
    h, w = train_items[0].shape
    acs = DESK_ACS[kind] if acs_width is None else acs_width
    base = baseline_mask(kind, h, w, R, acs, train_cfg.seed)
    params = learn_mask(train_items, val_items, score, MaskParams(kind, h, w, R, acs), train_cfg)
    mine = learned_mask(params, base.n_kept)
    rep_l = evaluate_mask(score, test_items, mine, eval_cfg, scaling)[0]
    rep_b = evaluate_mask(score, test_items, base, eval_cfg, scaling)[0]
    return {
        "params": params,
        "learned": mine,
        "baseline": base,
        "learned_report": rep_l,
        "baseline_report": rep_b,
        "R_learned": acceleration(mine),
        "R_baseline": acceleration(base),
    }


def with_steps(cfg, steps):
    return replace(cfg, steps=steps)
