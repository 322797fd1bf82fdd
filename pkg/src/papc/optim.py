"""ADAM with warmup/inverse-sqrt learning rate, and the accelerated projected gradient solver."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from . import se as se_core
from .errors import NumericError


def lr_schedule(n_step: int, d_mod: float, n_warmup: int = 4000) -> float:
    """d_mod^-0.5 * min(n^-0.5, n * n_warmup^-1.5)."""
    if n_step < 1:
        raise ValueError("n_step starts at 1")
    return d_mod**-0.5 * min(n_step**-0.5, n_step * n_warmup**-1.5)


class Adam:
    """ADAM over a dict of arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], d_mod: float, n_warmup: int = 4000,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.d_mod = d_mod
        self.n_warmup = n_warmup
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.n_step = 0

    def lr(self, n_step: int | None = None) -> float:
        return lr_schedule(self.n_step if n_step is None else n_step, self.d_mod, self.n_warmup)

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Descend along ``grads``; returns the learning rate used."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r} at step {self.n_step + 1}")
        self.n_step += 1
        t = self.n_step
        lr = self.lr()
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, g in grads.items():
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            self.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr


class Problem:
    """One sample's constants, laid out for the single-sample kernels."""

    def __init__(self, B, phi, scenario):
        self.B = np.ascontiguousarray(B, dtype=np.float64)
        self.phi = np.ascontiguousarray(phi, dtype=np.float64)
        self.scenario = scenario
        self.nu = se_core.mmse_variance(self.B, self.phi, scenario.zeta_p, scenario.tau_p)
        self.W = np.ascontiguousarray(np.sqrt(self.nu) / self.B)
        self.S = np.ascontiguousarray(np.sqrt(self.phi))
        self.active = se_core.active_mask(self.phi).astype(np.uint8)
        self.col_mask = self.active.astype(bool)[None, :]
        s = scenario
        self._args = (s.zeta_d, s.N, s.prelog, s.lambda_smooth)

    def utility(self, Mu) -> float:
        return kernels.utility(self.B, self.S, self.W, Mu, self.active, *self._args)

    def utility_grad(self, Mu):
        return kernels.utility_grad(self.B, self.S, self.W, Mu, self.active, *self._args)

    def project(self, X) -> np.ndarray:
        Y = kernels.project_rows(np.ascontiguousarray(X), 1.0 / math.sqrt(self.scenario.N))
        Y *= self.col_mask
        return Y


def utility_grad(B, phi, Mu, scenario) -> np.ndarray:
    """Gradient of the soft-min utility with respect to ``Mu`` by reverse-mode autodiff."""
    nu = se_core.mmse_variance(B, phi, scenario.zeta_p, scenario.tau_p)
    tape = ad.Tape()
    x = tape.leaf(Mu, name="Mu")
    u = se_core.utility_node(x, B, phi, nu, scenario)
    tape.backward(ad.sum_all(u))
    return x.grad


@dataclass
class ApgConfig:
    max_iters: int = 300
    eta0: float = 1.0
    shrink: float = 0.5
    grow: float = 2.0
    max_backtracks: int = 60
    restart: bool = True
    tol: float = 1e-7
    patience: int = 25

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.eta0 <= 0 or not (0 < self.shrink < 1):
            raise ValueError("need eta0 > 0 and 0 < shrink < 1")


@dataclass
class ApgResult:
    Mu: np.ndarray
    utility: float
    iters: int
    trace: list[float] = field(default_factory=list)
    eta: float = 1.0

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "utility"])
            for i, u in enumerate(self.trace):
                w.writerow([i, repr(float(u))])


def apg_solve(B, phi, scenario, cfg: ApgConfig | None = None, Mu0=None) -> ApgResult:
    """Maximise the soft-min utility over S with Nesterov-accelerated projected gradient.

    The extrapolated point is projected before the gradient is taken; the
    step is found by backtracking on the quadratic upper model, and momentum
    restarts whenever the utility drops. Returns the best iterate seen.
    """
    cfg = cfg or ApgConfig()
    prob = Problem(B, phi, scenario)
    if Mu0 is None:
        K_act = int(prob.active.sum())
        Mu0 = se_core.epa(prob.B.shape[0], prob.B.shape[1], scenario.N, K_act)
    x = prob.project(Mu0)
    fx = prob.utility(x)
    if not math.isfinite(fx):
        raise NumericError("utility is not finite at the starting point")
    x_prev = x
    best, best_u = x, fx
    trace = [fx]
    t = 1
    eta = cfg.eta0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        beta = (t - 1.0) / (t + 2.0)
        y = x if beta == 0.0 else prob.project(x + beta * (x - x_prev))
        fy, gy = prob.utility_grad(y)
        if not (math.isfinite(fy) and np.all(np.isfinite(gy))):
            raise NumericError(f"non-finite utility or gradient at APG iteration {it}")
        eta = min(eta * cfg.grow, cfg.eta0)
        for _ in range(cfg.max_backtracks):
            z = prob.project(y + eta * gy)
            d = z - y
            fz = prob.utility(z)
            if fz >= fy + float((gy * d).sum()) - float((d * d).sum()) / (2.0 * eta):
                break
            eta *= cfg.shrink
        if not math.isfinite(fz):
            raise NumericError(f"non-finite utility at APG iteration {it}")
        if cfg.restart and fz < fx:
            # drop the step and momentum; the next iteration is a plain ascent step from x
            t = 1
            x_prev = x
        else:
            x_prev, x, fx = x, z, fz
            t += 1
        if fx > best_u:
            best, best_u = x, fx
        trace.append(best_u)
        if it > cfg.patience and best_u - trace[-1 - cfg.patience] < cfg.tol:
            break
    return ApgResult(best, best_u, it, trace, eta)


def projected_gradient_residual(B, phi, Mu, scenario, eta: float = 1e-3) -> float:
    """||P_S(Mu + eta grad) - Mu|| / eta, zero exactly at stationary points."""
    prob = Problem(B, phi, scenario)
    _, g = prob.utility_grad(np.ascontiguousarray(Mu))
    return float(np.linalg.norm(prob.project(Mu + eta * g) - Mu) / eta)
