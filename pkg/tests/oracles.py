"""Independent reference implementations, written with explicit loops over scalars.

Nothing here imports the package; these are the yardsticks the tests compare against.
"""
import math

import numpy as np


def nu_scalar(B, phi, zeta_p, tau_p):
    M, K = len(B), len(B[0])
    nu = [[0.0] * K for _ in range(M)]
    for m in range(M):
        for k in range(K):
            s = 0.0
            for i in range(K):
                s += B[m][i] * phi[i][k]
            nu[m][k] = zeta_p * tau_p * B[m][k] ** 2 / (1.0 + zeta_p * tau_p * s)
    return nu


def sinr_scalar(B, phi, Mu, zeta_p, tau_p, zeta_d, N):
    """Per-user SINR from first principles: cross vectors nu_ik[m] = |psi_k psi_i| sqrt(nu_mi) beta_mk / beta_mi."""
    M, K = len(B), len(B[0])
    nu = nu_scalar(B, phi, zeta_p, tau_p)
    out = []
    for k in range(K):
        coh = [0.0] * K
        for i in range(K):
            overlap = math.sqrt(phi[k][i])
            acc = 0.0
            for m in range(M):
                acc += Mu[m][i] * overlap * math.sqrt(nu[m][i]) * B[m][k] / B[m][i]
            coh[i] = acc
        interf = 0.0
        for i in range(K):
            if i != k:
                interf += zeta_d * coh[i] ** 2
        beam = 0.0
        for i in range(K):
            for m in range(M):
                beam += B[m][k] * Mu[m][i] ** 2
        out.append(zeta_d * coh[k] ** 2 / (interf + zeta_d / N * beam + 1.0 / N**2))
    return out


def se_scalar(gammas, tau, tau_p):
    return [(1.0 - tau_p / tau) * math.log1p(g) / math.log(2.0) for g in gammas]


def utility_mp(se, lam, dps=50):
    """Soft-min evaluated in arbitrary precision."""
    import mpmath

    with mpmath.workdps(dps):
        s = mpmath.fsum(mpmath.exp(-mpmath.mpf(lam) * mpmath.mpf(x)) for x in se)
        return float(-mpmath.log(s / len(se)) / lam)


def torus_9_image(a, b, side):
    best = math.inf
    for dx in (-side, 0.0, side):
        for dy in (-side, 0.0, side):
            best = min(best, math.hypot(a[0] - b[0] - dx, a[1] - b[1] - dy))
    return best


def path_loss_scalar(d, L0, d0, d1):
    if d < d0:
        d = d0
    elif d > d1:
        d = d1
    return -L0 - 15.0 * math.log10(d1) - 20.0 * math.log10(d)


def dykstra_project(X, radius, iters=5000):
    """Projection onto {x >= 0, ||x|| <= r} by Dykstra's alternating scheme, row-wise."""
    x = np.array(X, dtype=float)
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(iters):
        y = np.maximum(x + p, 0.0)
        p = x + p - y
        z = y + q
        n = np.linalg.norm(z, axis=-1, keepdims=True)
        x_new = np.where(n > radius, z * radius / np.where(n > 0, n, 1.0), z)
        q = z - x_new
        if np.max(np.abs(x_new - x)) < 1e-15:
            x = x_new
            break
        x = x_new
    return x


def kkt_residual(x, z, radius):
    """Largest violation of the KKT system of min ||z - x||^2 over the orthant-ball intersection.

    Stationarity reads x = (1 + lam) z - nu with lam, nu >= 0, nu_i z_i = 0 and
    lam (||z|| - r) = 0.
    """
    x, z = np.asarray(x, float), np.asarray(z, float)
    viol = max(0.0, -float(z.min()), float(np.linalg.norm(z)) - radius)
    on = z > 0
    off_x = x[~on]
    viol = max(viol, float(off_x.max(initial=0.0)))  # nu_i = -x_i must be >= 0
    if on.any():
        lams = x[on] / z[on] - 1.0
        lam = float(lams.mean())
        viol = max(viol, float(np.abs((lams - lam) * z[on]).max()), -lam)
        if np.linalg.norm(z) < radius * (1 - 1e-12):
            viol = max(viol, abs(lam) * float(z.max()))
    return viol
