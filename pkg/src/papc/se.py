"""Closed-form downlink spectral efficiency under MMSE estimation and matched filtering.

Arrays may carry a leading batch axis: ``B`` and ``Mu`` are ``(..., M, K)``,
``phi`` is ``(..., K, K)``. Padded users have ``phi[k, k] == 0`` and are left
out of the soft-min.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import kernels

LN2 = math.log(2.0)
FEAS_TOL = 1e-12


def mmse_variance(B, phi, zeta_p: float, tau_p: int) -> np.ndarray:
    """nu_mk = zeta_p tau_p beta_mk^2 / (1 + zeta_p tau_p sum_i beta_mi phi_ik)."""
    B = np.asarray(B, dtype=float)
    c = zeta_p * tau_p
    return c * B * B / (1.0 + c * (B @ phi))


def active_mask(phi) -> np.ndarray:
    return np.diagonal(phi, axis1=-2, axis2=-1) > 0


def coherent_terms(B, phi, nu, Mu) -> np.ndarray:
    """A[..., k, i] = mu_i^T nu_ik, the coherent gain of user i's beam at user k."""
    X = Mu * np.sqrt(nu) / B
    return np.sqrt(phi) * (np.swapaxes(B, -1, -2) @ X)


def sinr(B, phi, nu, Mu, zeta_d: float, N: int) -> np.ndarray:
    """Per-user SINR, shape ``(..., K)``."""
    A = coherent_terms(B, phi, nu, Mu)
    K = A.shape[-1]
    diag = np.diagonal(A, axis1=-2, axis2=-1)
    off = A * A * (1.0 - np.eye(K))
    power = np.swapaxes(B, -1, -2) @ (Mu * Mu).sum(axis=-1)[..., None]
    den = zeta_d * off.sum(axis=-1) + (zeta_d / N) * power[..., 0] + 1.0 / (N * N)
    return zeta_d * diag * diag / den


def spectral_efficiency(gamma, tau: int, tau_p: int) -> np.ndarray:
    return (1.0 - tau_p / tau) * np.log1p(gamma) / LN2


def utility(se, lam: float, active=None) -> np.ndarray:
    """Soft-minimum -(1/lam) ln(mean_k exp(-lam se_k)) over active users, max-shifted."""
    se = np.asarray(se, dtype=float)
    if active is None:
        active = np.ones(se.shape, dtype=bool)
    active = np.broadcast_to(active, se.shape)
    smin = np.where(active, se, np.inf).min(axis=-1, keepdims=True)
    e = np.where(active, np.exp(-lam * (se - smin)), 0.0)
    n = active.sum(axis=-1)
    u = smin[..., 0] - np.log(e.sum(axis=-1) / n) / lam
    # the exact value lies in [min, min + ln(n)/lam]; clip away rounding at the edges
    return np.clip(u, smin[..., 0], smin[..., 0] + np.log(n) / lam)


def project_S(X, N: int) -> np.ndarray:
    """Euclidean projection onto {X >= 0, ||row||^2 <= 1/N}.

    Clamping then rescaling is exact here: with the clamped row y, the KKT
    point of min ||z - x||^2 over the ball-orthant intersection is z = t y with
    t = min(1, r / ||y||); scaling keeps z >= 0 and the zeroed coordinates have
    nonpositive x, so their multipliers are nonnegative. Rows already within
    a 1e-14 relative margin of the ball are left untouched, so the map is
    exactly idempotent.
    """
    X = np.asarray(X, dtype=float)
    radius = 1.0 / math.sqrt(N)
    if X.ndim == 2:
        return kernels.project_rows(np.ascontiguousarray(X), radius)
    flat = np.ascontiguousarray(X.reshape(-1, X.shape[-1]))
    return kernels.project_rows(flat, radius).reshape(X.shape)


def is_feasible(Mu, N: int, tol: float = FEAS_TOL) -> bool:
    Mu = np.asarray(Mu)
    return bool(np.all(Mu >= 0) and np.all((Mu * Mu).sum(axis=-1) <= 1.0 / N + tol))


def epa(M: int, K: int, N: int, K_active: int | None = None) -> np.ndarray:
    """Every BS splits full power equally over the active users."""
    K_active = K if K_active is None else K_active
    Mu = np.zeros((M, K))
    Mu[:, :K_active] = 1.0 / math.sqrt(N * K_active)
    return Mu


def epa_batch(M: int, K_active, K_max: int, N: int) -> np.ndarray:
    K_active = np.asarray(K_active)
    cols = np.arange(K_max)[None, None, :] < K_active[:, None, None]
    vals = 1.0 / np.sqrt(N * K_active)[:, None, None]
    return np.where(cols, vals, 0.0) * np.ones((1, M, 1))


class Evaluator:
    """Precomputed per-sample constants for repeated SE evaluation of one scenario batch."""

    def __init__(self, B, phi, scenario):
        self.B = np.asarray(B, dtype=float)
        self.phi = np.asarray(phi, dtype=float)
        self.scenario = scenario
        self.nu = mmse_variance(self.B, self.phi, scenario.zeta_p, scenario.tau_p)
        self.active = active_mask(self.phi)

    def sinr(self, Mu):
        s = self.scenario
        return sinr(self.B, self.phi, self.nu, Mu, s.zeta_d, s.N)

    def se(self, Mu):
        s = self.scenario
        return spectral_efficiency(self.sinr(Mu), s.tau, s.tau_p)

    def utility(self, Mu):
        return utility(self.se(Mu), self.scenario.lambda_smooth, self.active)


def utility_node(Mu: ad.Node, B, phi, nu, scenario) -> ad.Node:
    """Soft-min utility of a (batched) power matrix node; returns shape ``(..., 1, 1)``.

    ``B``, ``phi`` and ``nu`` enter as constants.
    """
    tape = Mu.tape
    B = np.asarray(B, dtype=float)
    K = B.shape[-1]
    zeta_d, N = scenario.zeta_d, scenario.N
    lam = scenario.lambda_smooth
    Bt = tape.constant(np.swapaxes(B, -1, -2))
    X = Mu * tape.constant(np.sqrt(nu) / B)
    A = ad.mul(Bt @ X, tape.constant(np.sqrt(phi)))
    A2 = ad.square(A)
    eye = np.eye(K)
    diag = ad.row_sums(ad.mul(A2, tape.constant(eye)))
    off = ad.row_sums(ad.mul(A2, tape.constant(1.0 - eye)))
    power = Bt @ ad.row_sums(ad.square(Mu))
    den = ad.shift(ad.add(ad.scale(off, zeta_d), ad.scale(power, zeta_d / N)), 1.0 / (N * N))
    gamma = ad.div(ad.scale(diag, zeta_d), den)
    se = ad.scale(ad.log(ad.shift(gamma, 1.0)), scenario.prelog / LN2)  # (..., K, 1)

    active = active_mask(phi)[..., :, None].astype(float)
    se_v = se.value
    smin = np.where(active > 0, se_v, np.inf).min(axis=-2, keepdims=True)
    e = ad.mul(ad.exp(ad.scale(ad.sub(se, smin), -lam)), tape.constant(active))
    mean = ad.mul(ad.col_sums(e), tape.constant(1.0 / active.sum(axis=-2, keepdims=True)))
    return ad.add(ad.scale(ad.log(mean), -1.0 / lam), tape.constant(smin))
