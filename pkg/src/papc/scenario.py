"""Placements, large-scale fading and pilot assignment for cell-free scenarios.

Randomness comes from numpy's counter-based Philox bit generator keyed by
``SeedSequence(seed, spawn_key=...)``:

* ``(0,)`` draws the BS placement, shared by every sample of a scenario;
* ``(1, split, index)`` draws user positions, shadowing and pilot reuse for
  sample ``index`` of ``split`` (0 = train, 1 = test, ...).

A sample therefore depends only on ``(cfg, seed, split, index)`` and samples can
be generated in any order or in parallel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PAD_FADING, ScenarioConfig

SPLITS = {"train": 0, "test": 1, "val": 2}


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass
class Placement:
    bs_xy: np.ndarray
    user_xy: np.ndarray


def draw_bs(cfg: ScenarioConfig) -> np.ndarray:
    return rng_for(cfg.seed, 0).uniform(0.0, cfg.side_km, size=(cfg.M, 2))


def make_placement(cfg: ScenarioConfig, rng: np.random.Generator, K: int | None = None) -> Placement:
    """Uniform BSs (fixed by ``cfg.seed``) and ``K`` fresh uniform users."""
    K = cfg.K_max if K is None else K
    users = rng.uniform(0.0, cfg.side_km, size=(K, 2))
    return Placement(draw_bs(cfg), users)


def torus_distance(a, b, side: float) -> np.ndarray:
    """Euclidean distance with per-axis wrap-around on a square of ``side``.

    Broadcasts over leading axes; the last axis holds (x, y).
    """
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    d = np.minimum(d, side - d)
    return np.sqrt((d * d).sum(axis=-1))


def path_loss_db(d_km, cfg: ScenarioConfig) -> np.ndarray:
    """Three-slope model: -L0 - 15 log10(d1) - 20 log10(clip(d, d0, d1))."""
    dp = np.clip(np.asarray(d_km, dtype=float), cfg.d0_km, cfg.d1_km)
    return -cfg.L0_db - 15.0 * np.log10(cfg.d1_km) - 20.0 * np.log10(dp)


def distances(placement: Placement, side: float) -> np.ndarray:
    """M x K torus distances."""
    return torus_distance(placement.bs_xy[:, None, :], placement.user_xy[None, :, :], side)


def draw_fading(cfg: ScenarioConfig, placement: Placement, rng: np.random.Generator) -> np.ndarray:
    pl = path_loss_db(distances(placement, cfg.side_km), cfg)
    z = rng.normal(0.0, cfg.sigma_sh_db, size=pl.shape) if cfg.sigma_sh_db > 0 else 0.0
    return 10.0 ** ((pl + z) / 10.0)


def assign_pilots(K: int, tau_p: int, rng: np.random.Generator) -> np.ndarray:
    """First ``min(K, tau_p)`` users get distinct pilots; the rest reuse at random."""
    first = min(K, tau_p)
    pilots = np.empty(K, dtype=np.int64)
    pilots[:first] = np.arange(first)
    if K > first:
        pilots[first:] = rng.integers(0, tau_p, size=K - first)
    return pilots


def pilot_gram(pilots, K_active: int, K_max: int) -> np.ndarray:
    """K_max x K_max matrix with 1 where two active users share a pilot."""
    pilots = np.asarray(pilots)[:K_active]
    if K_active > K_max:
        raise ValueError(f"K_active={K_active} exceeds K_max={K_max}")
    phi = np.zeros((K_max, K_max))
    phi[:K_active, :K_active] = (pilots[:, None] == pilots[None, :]).astype(float)
    return phi


def pad_fading(beta: np.ndarray, K_max: int, pad: float = PAD_FADING) -> np.ndarray:
    M, K = beta.shape
    if K > K_max:
        raise ValueError(f"K_active={K} exceeds K_max={K_max}")
    out = np.full((M, K_max), pad)
    out[:, :K] = beta
    return out


@dataclass
class Sample:
    beta: np.ndarray  # M x K_max, padded
    pilots: np.ndarray  # K_max, -1 for padded users
    K_active: int

    def phi(self) -> np.ndarray:
        return pilot_gram(self.pilots, self.K_active, self.pilots.shape[0])


def generate_sample(
    cfg: ScenarioConfig,
    index: int,
    split: int = 0,
    K_active: int | None = None,
    pad: float = PAD_FADING,
    bs_xy: np.ndarray | None = None,
) -> Sample:
    rng = rng_for(cfg.seed, 1, split, index)
    if K_active is None:
        K_active = int(rng.integers(cfg.K_min, cfg.K_max + 1)) if cfg.K_min is not None else cfg.K_max
    users = rng.uniform(0.0, cfg.side_km, size=(K_active, 2))
    placement = Placement(draw_bs(cfg) if bs_xy is None else bs_xy, users)
    beta = draw_fading(cfg, placement, rng)
    pilots = np.full(cfg.K_max, -1, dtype=np.int64)
    pilots[:K_active] = assign_pilots(K_active, cfg.tau_p, rng)
    return Sample(pad_fading(beta, cfg.K_max, pad), pilots, K_active)


class Dataset:
    """In-memory batch of samples sharing one scenario."""

    def __init__(self, beta: np.ndarray, pilots: np.ndarray, K_active: np.ndarray, tau_p: int):
        self.beta = np.ascontiguousarray(beta, dtype=np.float64)  # P x M x K_max
        self.pilots = np.asarray(pilots, dtype=np.int64)  # P x K_max
        self.K_active = np.asarray(K_active, dtype=np.int64)  # P
        self.tau_p = int(tau_p)
        if self.beta.ndim != 3 or self.pilots.shape != (self.beta.shape[0], self.beta.shape[2]):
            raise ValueError("inconsistent dataset arrays")

    @property
    def P(self) -> int:
        return self.beta.shape[0]

    @property
    def M(self) -> int:
        return self.beta.shape[1]

    @property
    def K_max(self) -> int:
        return self.beta.shape[2]

    def __len__(self):
        return self.P

    def phi(self) -> np.ndarray:
        """P x K_max x K_max pilot gram stack."""
        p = self.pilots
        K = np.arange(self.K_max)
        active = K[None, :] < self.K_active[:, None]
        same = p[:, :, None] == p[:, None, :]
        return (same & active[:, :, None] & active[:, None, :]).astype(np.float64)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.beta[idx], self.pilots[idx], self.K_active[idx], self.tau_p)

    def sample(self, i: int) -> Sample:
        return Sample(self.beta[i], self.pilots[i], int(self.K_active[i]))

    def contamination_fraction(self) -> float:
        """Fraction of active users that share their pilot with another user."""
        phi = self.phi()
        shared = (phi.sum(axis=2) > 1).sum()
        total = self.K_active.sum()
        return float(shared / total) if total else 0.0


def generate_dataset(
    cfg: ScenarioConfig, P: int, split: int = 0, start: int = 0, pad: float = PAD_FADING
) -> Dataset:
    bs = draw_bs(cfg)
    beta = np.empty((P, cfg.M, cfg.K_max))
    pilots = np.empty((P, cfg.K_max), dtype=np.int64)
    k_active = np.empty(P, dtype=np.int64)
    for p in range(P):
        s = generate_sample(cfg, start + p, split, pad=pad, bs_xy=bs)
        beta[p], pilots[p], k_active[p] = s.beta, s.pilots, s.K_active
    return Dataset(beta, pilots, k_active, cfg.tau_p)
