"""Unsupervised training (maximise mean soft-min utility) and evaluation of power-control policies."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import se as se_core
from .config import PAD_FADING, ModelHyper, ScenarioConfig
from .errors import ConfigError, DataError, NumericError
from .nn import PROJECTIONS, Model
from .optim import Adam, ApgConfig, apg_solve
from .scenario import Dataset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 16
    batch_size: int = 256
    model: str = "papc"
    seed: int = 0
    varying_k: bool = False
    K_min: int | None = None
    K_max: int | None = None
    n_warmup: int = 4000
    projection: str = "scale"
    val_fraction: float = 0.05
    select_best: bool = False
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    dataset: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.projection not in PROJECTIONS:
            raise ConfigError(f"projection must be one of {PROJECTIONS}")
        if self.K_min is not None and self.K_max is not None and self.K_min > self.K_max:
            raise ConfigError("K_min must not exceed K_max")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")


@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    mean_batch_utility: float


@dataclass
class TrainResult:
    model: Model
    log: list[LogRow] = field(default_factory=list)
    epoch_utility: list[float] = field(default_factory=list)
    val_utility: list[float] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "step", "lr", "mean_batch_utility"])
            for r in self.log:
                w.writerow([r.epoch, r.step, repr(r.lr), repr(r.mean_batch_utility)])


def truncate_users(beta: np.ndarray, phi: np.ndarray, k_new: np.ndarray, pad: float = PAD_FADING):
    """Keep the first ``k_new[p]`` users of each sample, padding the rest."""
    K = beta.shape[-1]
    keep = np.arange(K)[None, :] < np.asarray(k_new)[:, None]
    beta = np.where(keep[:, None, :], beta, pad)
    phi = phi * keep[:, :, None] * keep[:, None, :]
    return beta, phi


def batch_loss(model: Model, tape: ad.Tape, nodes, beta, phi, scenario: ScenarioConfig, projection: str):
    """Return (loss node, per-sample utility node); loss = -mean utility."""
    nu = se_core.mmse_variance(beta, phi, scenario.zeta_p, scenario.tau_p)
    Mu = model.forward(tape, nodes, beta, phi, scenario.N, projection)
    u = se_core.utility_node(Mu, beta, phi, nu, scenario)
    return ad.neg(ad.mean_batch(u)), u


def _check_shapes(model: Model, ds: Dataset) -> None:
    if ds.M != model.hyper.M or ds.K_max != model.hyper.K_max:
        raise DataError(
            f"dataset is M={ds.M}, K_max={ds.K_max} but model expects M={model.hyper.M}, K_max={model.hyper.K_max}"
        )


def train(cfg: TrainConfig, scenario: ScenarioConfig, hyper: ModelHyper, dataset: Dataset,
          model: Model | None = None, log_every: int = 0) -> TrainResult:
    """Maximise the empirical mean utility with ADAM; deterministic given ``cfg.seed``."""
    start = time.perf_counter()
    model = model or Model.create(cfg.model, hyper, seed=cfg.seed)
    _check_shapes(model, dataset)
    if cfg.batch_size > dataset.P:
        raise ConfigError(f"batch_size={cfg.batch_size} exceeds dataset size {dataset.P}")
    if model.kind == "fcn" and cfg.varying_k:
        raise ConfigError("the FCN baseline has no varying-K support")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(dataset.P)
    n_val = int(round(cfg.val_fraction * dataset.P))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if cfg.batch_size > train_idx.size:
        raise ConfigError("batch_size exceeds the training split")
    phi_all = dataset.phi()
    k_lo = cfg.K_min or 1
    k_hi = cfg.K_max or dataset.K_max
    opt = Adam(model.params, model.hyper.d_mod, cfg.n_warmup)
    result = TrainResult(model)
    best_val, best_params = -math.inf, None
    last_good = {k: v.copy() for k, v in model.params.items()}
    log.info("training %s with %d parameters on %d samples", model.kind, model.n_params(), train_idx.size)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(train_idx)
        utils = []
        for lo in range(0, perm.size, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            beta, phi = dataset.beta[idx], phi_all[idx]
            if cfg.varying_k:
                k_draw = rng.integers(k_lo, k_hi + 1, size=idx.size)
                beta, phi = truncate_users(beta, phi, np.minimum(dataset.K_active[idx], k_draw))
            tape = ad.Tape()
            nodes = model.bind(tape)
            loss, _ = batch_loss(model, tape, nodes, beta, phi, scenario, cfg.projection)
            value = float(loss.value[0, 0])
            if not math.isfinite(value):
                model.params.update(last_good)
                if cfg.checkpoint_path:
                    model.save(cfg.checkpoint_path)
                raise NumericError(f"non-finite loss at epoch {epoch}, step {opt.n_step + 1}")
            tape.backward(loss)
            for k, v in model.params.items():
                last_good[k][...] = v
            lr = opt.step({name: node.grad for name, node in nodes.items()})
            utils.append(-value)
            result.log.append(LogRow(epoch, opt.n_step, lr, -value))
            if log_every and opt.n_step % log_every == 0:
                log.info("epoch %d step %d lr %.3e utility %.4f", epoch, opt.n_step, lr, -value)
        result.epoch_utility.append(float(np.mean(utils)))
        if n_val:
            v = float(evaluate_model(model, dataset.subset(val_idx), scenario).utilities.mean())
            result.val_utility.append(v)
            if v > best_val:
                best_val, best_params, result.best_epoch = v, {k: a.copy() for k, a in model.params.items()}, epoch
        log.info("epoch %d mean train utility %.4f%s", epoch, result.epoch_utility[-1],
                 f" val {result.val_utility[-1]:.4f}" if n_val else "")
        if cfg.checkpoint_every and cfg.checkpoint_path and epoch % cfg.checkpoint_every == 0:
            model.save(cfg.checkpoint_path)
    if cfg.select_best and best_params is not None:
        model.params.update(best_params)
    result.seconds = time.perf_counter() - start
    return result


@dataclass
class EvalResult:
    se: np.ndarray  # P x K_max, NaN for padded users
    utilities: np.ndarray  # P
    K_active: np.ndarray
    feasible: bool
    iters: np.ndarray | None = None
    seconds: float = 0.0

    def user_se(self) -> np.ndarray:
        return self.se[~np.isnan(self.se)]

    def summary(self) -> dict:
        vals = self.user_se()
        mins = np.nanmin(self.se, axis=1)
        out = {
            "samples": int(self.utilities.size),
            "users": int(vals.size),
            "mean_utility": float(self.utilities.mean()),
            "mean_user_se": float(vals.mean()),
            "p10_user_se": float(np.percentile(vals, 10)),
            "median_user_se": float(np.percentile(vals, 50)),
            "mean_min_se": float(mins.mean()),
            "p10_min_se": float(np.percentile(mins, 10)),
            "feasible": bool(self.feasible),
            "seconds": self.seconds,
        }
        if self.iters is not None:
            out["mean_iters"] = float(self.iters.mean())
        return out

    def write_se(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "user_id", "se_bits_s_hz"])
            for p in range(self.se.shape[0]):
                for k in range(int(self.K_active[p])):
                    w.writerow([p, k, repr(float(self.se[p, k]))])


def empirical_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    x = np.sort(np.asarray(values, dtype=float))
    return x, np.arange(1, x.size + 1) / x.size


def _finish(Mu: np.ndarray, dataset: Dataset, phi: np.ndarray, scenario: ScenarioConfig, seconds: float, iters=None):
    ev = se_core.Evaluator(dataset.beta, phi, scenario)
    se = ev.se(Mu)
    util = se_core.utility(se, scenario.lambda_smooth, ev.active)
    se = np.where(ev.active, se, np.nan)
    return EvalResult(se, util, dataset.K_active.copy(), se_core.is_feasible(Mu, scenario.N), iters, seconds)


def evaluate_model(model: Model, dataset: Dataset, scenario: ScenarioConfig, batch: int = 500) -> EvalResult:
    _check_shapes(model, dataset)
    phi = dataset.phi()
    t0 = time.perf_counter()
    Mu = np.concatenate(
        [model.predict(dataset.beta[i:i + batch], phi[i:i + batch], scenario.N) for i in range(0, dataset.P, batch)]
    ) if dataset.P else np.zeros((0, dataset.M, dataset.K_max))
    return _finish(Mu, dataset, phi, scenario, time.perf_counter() - t0)


def evaluate_epa(dataset: Dataset, scenario: ScenarioConfig) -> EvalResult:
    t0 = time.perf_counter()
    Mu = se_core.epa_batch(dataset.M, dataset.K_active, dataset.K_max, scenario.N)
    return _finish(Mu, dataset, dataset.phi(), scenario, time.perf_counter() - t0)


def evaluate_apg(dataset: Dataset, scenario: ScenarioConfig, cfg: ApgConfig | None = None) -> EvalResult:
    phi = dataset.phi()
    t0 = time.perf_counter()
    Mu = np.empty_like(dataset.beta)
    iters = np.empty(dataset.P, dtype=np.int64)
    for p in range(dataset.P):
        res = apg_solve(dataset.beta[p], phi[p], scenario, cfg)
        Mu[p], iters[p] = res.Mu, res.iters
    return _finish(Mu, dataset, phi, scenario, time.perf_counter() - t0, iters)


def evaluate(policy, dataset: Dataset, scenario: ScenarioConfig, apg_cfg: ApgConfig | None = None) -> EvalResult:
    """``policy`` is a :class:`Model`, ``"epa"`` or ``"apg"``."""
    if isinstance(policy, Model):
        return evaluate_model(policy, dataset, scenario)
    if policy == "epa":
        return evaluate_epa(dataset, scenario)
    if policy == "apg":
        return evaluate_apg(dataset, scenario, apg_cfg)
    raise ConfigError(f"unknown policy {policy!r}")
