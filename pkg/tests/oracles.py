"""Independent reference implementations used to check the library.

Each oracle is deliberately written in the most direct (often slowest)
style available -- explicit loops and full enumeration -- so that it shares
no code path with the implementation under test.
"""

from itertools import product

import numpy as np

from scoliosim.recon import CoronalImage


# ---------------------------------------------------------------------------
# two-way ANOVA / ICC by direct summation

def icc_oracle(matrix, rating="single"):
    """Absolute-agreement two-way ICC from explicit sums of squares."""
    m = np.asarray(matrix, dtype=float)
    n, k = m.shape
    grand = m.sum() / (n * k)
    row_means = [sum(m[i, j] for j in range(k)) / k for i in range(n)]
    col_means = [sum(m[i, j] for i in range(n)) / n for j in range(k)]

    ss_rows = k * sum((rm - grand) ** 2 for rm in row_means)
    ss_cols = n * sum((cm - grand) ** 2 for cm in col_means)
    ss_err = sum(
        (m[i, j] - row_means[i] - col_means[j] + grand) ** 2
        for i in range(n) for j in range(k)
    )
    ms_r = ss_rows / (n - 1)
    ms_c = ss_cols / (k - 1)
    ms_e = ss_err / ((n - 1) * (k - 1))
    if rating == "single":
        return (ms_r - ms_e) / (ms_r + (k - 1) * ms_e + k * (ms_c - ms_e) / n)
    return (ms_r - ms_e) / (ms_r + (ms_c - ms_e) / n)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank by full 2^n enumeration

def _midranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = np.asarray(values)[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_enumeration_p(d, two_sided=True):
    """Exact signed-rank p by enumerating every sign assignment."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0.0]
    n = len(d)
    ranks = _midranks(np.abs(d))
    w_obs = float(ranks[d > 0].sum())
    ge = le = 0
    for signs in product((0, 1), repeat=n):
        w = float(sum(r for r, s in zip(ranks, signs) if s))
        if w >= w_obs - 1e-12:
            ge += 1
        if w <= w_obs + 1e-12:
            le += 1
    total = 2 ** n
    p_ge = ge / total
    p_le = le / total
    if two_sided:
        return min(1.0, 2.0 * min(p_ge, p_le))
    return p_ge


# ---------------------------------------------------------------------------
# analytic tangent-angle oracle on a lateral-deviation function

def tangent_spread_oracle(x_of_z, z_lo, z_hi, step=0.05):
    """Max minus min tangent angle (degrees) of x(z) by dense sampling."""
    z = np.arange(z_lo, z_hi + step / 2, step)
    x = np.asarray([x_of_z(v) for v in z], dtype=float)
    theta = np.degrees(np.arctan(np.gradient(x, z)))
    return float(theta.max() - theta.min())


# ---------------------------------------------------------------------------
# synthetic coronal images with a known dark ridge

def ridge_image(x_of_z, nz=400, nx=160, spacing=1.0, origin=(0.0, -80.0),
                background=0.8, ridge_value=0.1, ridge_halfwidth_px=2,
                noise_sigma=0.0, seed=0):
    """CoronalImage with a dark ridge following x = x_of_z(z)."""
    rng = np.random.default_rng(seed)
    z0, x0 = origin
    pix = np.full((nz, nx), background)
    cols = np.arange(nx)
    true_cols = np.empty(nz)
    for r in range(nz):
        z = z0 + r * spacing
        c = (x_of_z(z) - x0) / spacing
        true_cols[r] = c
        ridge = np.abs(cols - c) <= ridge_halfwidth_px
        pix[r, ridge] = ridge_value
    if noise_sigma > 0:
        pix = np.clip(pix + rng.normal(0.0, noise_sigma, pix.shape), 0.0, 1.0)
    return CoronalImage(
        pixels=pix, counts=np.ones((nz, nx)), spacing=spacing,
        origin_zx=(z0, x0), depth=10.0, band=3.0, provenance="direct",
    ), true_cols
