"""Pure-numpy fallback for :mod:`papc._kernels`; identical signatures and results.

All routines act on one sample: ``B``, ``sqrt_phi``-like arrays are M x K or
K x K float64, ``w = sqrt(nu) / beta`` and ``active`` is a length-K 0/1 mask.
"""
import math

import numpy as np

LN2 = math.log(2.0)


def _forward(B, S, W, Mu, zeta_d, N):
    A = S * (B.T @ (Mu * W))  # A[k, i] = |psi_k^T psi_i*| sum_m beta_mk mu_mi sqrt(nu_mi) / beta_mi
    diag = np.diagonal(A).copy()
    off = A * A
    np.fill_diagonal(off, 0.0)
    power = B.T @ (Mu * Mu).sum(axis=1)
    den = zeta_d * off.sum(axis=1) + (zeta_d / N) * power + 1.0 / (N * N)
    num = zeta_d * diag * diag
    return A, num / den, den


def sinr(B, S, W, Mu, zeta_d, N):
    return _forward(B, S, W, Mu, float(zeta_d), int(N))[1]


def _softmin(se, active, lam):
    act = active.astype(bool)
    n = act.sum()
    smin = se[act].min()
    e = np.where(act, np.exp(-lam * (se - smin)), 0.0)
    tot = e.sum()
    return smin - math.log(tot / n) / lam, e / tot


def utility(B, S, W, Mu, active, zeta_d, N, prelog, lam):
    gamma = _forward(B, S, W, Mu, float(zeta_d), int(N))[1]
    se = prelog * np.log1p(gamma) / LN2
    return _softmin(se, active, lam)[0]


def utility_grad(B, S, W, Mu, active, zeta_d, N, prelog, lam):
    """Soft-min utility and its gradient with respect to ``Mu``."""
    zeta_d = float(zeta_d)
    A, gamma, den = _forward(B, S, W, Mu, zeta_d, int(N))
    se = prelog * np.log1p(gamma) / LN2
    u, weights = _softmin(se, active, lam)
    g = weights * prelog / ((1.0 + gamma) * LN2) / den
    GA = (2.0 * zeta_d) * A * (-(g * gamma))[:, None]
    idx = np.arange(A.shape[0])
    GA[idx, idx] = 2.0 * zeta_d * g * np.diagonal(A)
    gt = -g * gamma * zeta_d / N
    grad = W * (B @ (GA * S)) + 2.0 * Mu * (B @ gt)[:, None]
    return u, grad


def project_rows(X, radius):
    """Clamp negatives, then pull rows with norm above ``radius`` onto the sphere."""
    Y = np.maximum(X, 0.0)
    sq = (Y * Y).sum(axis=1)
    over = sq > radius * radius * (1.0 + 1e-14)
    if over.any():
        Y[over] *= (radius / np.sqrt(sq[over]))[:, None]
    return Y
