"""Fixed comparison masks: equispaced lines and constant-radius Poisson-disc points."""

import numpy as np

from .mri import LINE, POINT, BinaryMask, acs_sites
from .tensor import make_rng


def equispaced_mask(w, target_R, acs_width=0, h=None):
    """Every k-th column through the center column, k picked so R is closest to target."""
    if target_R < 1:
        raise ValueError(f"infeasible acceleration {target_R}")
    h = w if h is None else h
    center = w // 2
    cols = np.arange(w)
    best = None
    for k in range(1, w + 1):
        m = BinaryMask(LINE, h, w, (cols - center) % k == 0, acs_width)
        gap = abs(m.n_sites / m.n_kept - target_R)
        if best is None or gap < best[0] - 1e-12:
            best = (gap, m)
    return best[1]


def _bridson(h, w, r, rng, blocked, tries=30):
    """Dart throwing with an active list on integer grid sites; pairwise distance >= r."""
    cell = r / np.sqrt(2.0)
    gh, gw = int(np.ceil(h / cell)) + 1, int(np.ceil(w / cell)) + 1
    lookup = -np.ones((gh, gw), dtype=int)
    pts = []
    reach = int(np.ceil(r / cell))

    def ok(p):
        y, x = p
        if not (0 <= y < h and 0 <= x < w) or blocked[y, x]:
            return False
        cy, cx = int(y / cell), int(x / cell)
        for j in range(max(cy - reach, 0), min(cy + reach + 1, gh)):
            for i in range(max(cx - reach, 0), min(cx + reach + 1, gw)):
                q = lookup[j, i]
                if q >= 0:
                    qy, qx = pts[q]
                    if (qy - y) ** 2 + (qx - x) ** 2 < r * r:
                        return False
        return True

    def add(p):
        lookup[int(p[0] / cell), int(p[1] / cell)] = len(pts)
        pts.append(p)
        active.append(len(pts) - 1)

    free = np.argwhere(~blocked)
    if len(free) == 0:
        return pts
    active = []
    add(tuple(int(v) for v in free[rng.integers(len(free))]))
    while active:
        a = rng.integers(len(active))
        py, px = pts[active[a]]
        for _ in range(tries):
            rad = rng.uniform(r, 2 * r)
            ang = rng.uniform(0, 2 * np.pi)
            cand = (int(round(py + rad * np.sin(ang))), int(round(px + rad * np.cos(ang))))
            if ok(cand):
                add(cand)
                break
        else:
            active[a] = active[-1]
            active.pop()
    return pts


def poisson_disc_points(h, w, r, acs_width, seed):
    blocked = acs_sites(POINT, h, w, acs_width)
    return _bridson(h, w, r, make_rng(seed), blocked)


def poisson_disc_mask_with_radius(h, w, target_R, acs_width, rng, tol=0.05, max_iter=50):
    """Poisson-disc POINT mask and its radius, bisected until R is within ``tol`` of target.

    On the integer grid the point count jumps wherever r crosses an
    achievable distance (sqrt 5, sqrt 8, ...), so some targets have no
    radius at all. When the bracket collapses, the densest pattern above
    the budget is thinned at random to the target count; dropping points
    keeps every pairwise distance >= r.
    """
    if target_R < 1:
        raise ValueError(f"infeasible acceleration {target_R}")
    if target_R == 1:
        return BinaryMask.full(POINT, h, w, acs_width), 0.0
    acs = acs_sites(POINT, h, w, acs_width)
    n_acs = int(acs.sum())
    if n_acs and h * w / n_acs < target_R * (1 - tol):
        raise ValueError("calibration block alone exceeds the sampling budget")
    seed = int(rng.integers(2**63))
    lo, hi = 0.5, float(max(h, w))
    dense = None
    for _ in range(max_iter):
        r = 0.5 * (lo + hi)
        keep = np.zeros((h, w), dtype=bool)
        for y, x in poisson_disc_points(h, w, r, acs_width, seed):
            keep[y, x] = True
        mask = BinaryMask(POINT, h, w, keep, acs_width)
        R = mask.n_sites / mask.n_kept
        if abs(R - target_R) <= tol * target_R:
            return mask, r
        if R < target_R:
            lo, dense = r, (mask, r)
        else:
            hi = r
        if hi - lo < 1e-6:
            break
    if dense is None:
        raise RuntimeError(f"radius bisection did not reach R={target_R} within {max_iter} iterations")
    mask, r = dense
    free = np.argwhere(mask.keep & ~acs)
    n_keep = max(int(round(h * w / target_R)) - n_acs, 0)
    pick = make_rng(seed).choice(len(free), size=n_keep, replace=False)
    keep = np.zeros((h, w), dtype=bool)
    keep[tuple(free[pick].T)] = True
    return BinaryMask(POINT, h, w, keep, acs_width), r


def poisson_disc_mask(h, w, target_R, acs_width, rng):
    return poisson_disc_mask_with_radius(h, w, target_R, acs_width, rng)[0]
