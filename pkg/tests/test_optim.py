import math

import numpy as np
import pytest

from papc import kernels
from papc import se as se_core
from papc.config import ScenarioConfig, get_preset
from papc.errors import NumericError
from papc.optim import Adam, ApgConfig, Problem, apg_solve, lr_schedule, projected_gradient_residual, utility_grad
from papc.scenario import generate_dataset, pilot_gram

from gradcheck import max_rel_error, numeric_grad

CFG = get_preset("scenario0").scenario


def test_lr_examples():
    assert lr_schedule(4000, 16, 4000) == pytest.approx(0.25 / math.sqrt(4000), rel=1e-15)
    assert lr_schedule(4000, 16, 4000) == pytest.approx(3.953e-3, rel=1e-4)
    assert lr_schedule(1, 16, 4000) == pytest.approx(9.88e-7, rel=1e-3)
    peak = lr_schedule(4000, 16)
    assert lr_schedule(3999, 16) < peak and lr_schedule(4001, 16) < peak
    with pytest.raises(ValueError):
        lr_schedule(0, 16)


def test_lr_branches_meet_at_warmup():
    n = 4000
    assert n**-0.5 == pytest.approx(n * n**-1.5, rel=1e-15)


def test_adam_zero_gradient():
    p = {"w": np.array([[1.0, -2.0]])}
    opt = Adam(p, 16)
    opt.step({"w": np.zeros((1, 2))})
    assert np.array_equal(p["w"], [[1.0, -2.0]])


def test_adam_first_step_hand_formula():
    g = np.array([[0.3, -4.0, 1e-3]])
    p = {"w": np.zeros((1, 3))}
    opt = Adam(p, 16)
    lr = opt.step({"w": g})
    # bias-corrected moments on step one are g and g^2
    np.testing.assert_allclose(p["w"], -lr * g / (np.abs(g) + 1e-9), rtol=1e-12)
    assert lr == lr_schedule(1, 16)


def test_adam_constant_gradient_sign():
    p = {"w": np.zeros((2, 2))}
    opt = Adam(p, 16, n_warmup=10)
    g = np.array([[1.0, -2.0], [0.5, -0.1]])
    prev = p["w"].copy()
    for _ in range(200):
        opt.step({"w": g})
        d = p["w"] - prev
        prev = p["w"].copy()
    np.testing.assert_array_equal(np.sign(d), -np.sign(g))
    assert opt.n_step == 200


def test_adam_rejects_nan():
    p = {"w": np.zeros((1, 2))}
    with pytest.raises(NumericError):
        Adam(p, 16).step({"w": np.array([[np.nan, 0.0]])})


def _instance(seed, M=5, K=3, tau_p=2):
    rng = np.random.default_rng(seed)
    B = 10 ** rng.uniform(-10, -7, size=(M, K))
    phi = pilot_gram(rng.integers(0, tau_p, size=K), K, K)
    Mu = se_core.project_S(rng.uniform(0.05, 1.0, size=(M, K)), CFG.N)
    return B, phi, Mu


@pytest.mark.parametrize("seed", range(6))
def test_utility_grad_three_way(seed):
    B, phi, Mu = _instance(seed)
    prob = Problem(B, phi, CFG)
    u, g_kernel = prob.utility_grad(Mu)
    g_tape = utility_grad(B, phi, Mu, CFG)
    num = numeric_grad(lambda x: prob.utility(np.ascontiguousarray(x)), Mu, h=1e-5)
    assert u == pytest.approx(float(se_core.Evaluator(B, phi, CFG).utility(Mu)), rel=1e-13)
    assert max_rel_error(g_tape, num) < 1e-6
    assert max_rel_error(g_kernel, num) < 1e-6
    np.testing.assert_allclose(g_kernel, g_tape, rtol=1e-11, atol=1e-14)


def test_utility_grad_symmetric_duplicates():
    B, _, Mu = _instance(3, K=3)
    B[:, 1] = B[:, 0]
    phi = np.eye(3)
    Mu[:, 1] = Mu[:, 0]
    g = utility_grad(B, phi, Mu, CFG)
    np.testing.assert_allclose(g[:, 0], g[:, 1], rtol=1e-12)


def test_gradient_concentrates_on_weakest_user():
    B, phi, Mu = _instance(5, K=3, tau_p=3)
    cfg = CFG.replace(lambda_smooth=100.0)
    ev = se_core.Evaluator(B, phi, cfg)
    se = ev.se(Mu)
    assert np.sort(se)[1] - np.sort(se)[0] > 0.1
    k = int(np.argmin(se))
    g = utility_grad(B, phi, Mu, cfg)
    g_k = numeric_grad(lambda x: float(ev.se(x)[k]), Mu, h=1e-5)
    # the soft-min weight of the weakest user is >= 0.99, so its SE gradient carries the utility gradient
    assert np.linalg.norm(g - g_k) <= 0.01 * np.linalg.norm(g)


def test_apg_single_user():
    cfg = ScenarioConfig(M=6, K_max=1, tau_p=1, area_km2=0.006)
    ds = generate_dataset(cfg, 5)
    for p in range(ds.P):
        B, phi = ds.beta[p], ds.phi()[p]
        res = apg_solve(B, phi, cfg)
        ev = se_core.Evaluator(B, phi, cfg)
        assert res.utility >= ev.utility(se_core.epa(6, 1, cfg.N)) - 1e-12
        # one user: S is a box, so a bounded quasi-Newton solve is an independent reference
        from scipy.optimize import minimize

        f = lambda x: -float(ev.utility(x.reshape(6, 1)))
        ref = minimize(f, np.full(6, 0.25), method="L-BFGS-B", bounds=[(0, 0.5)] * 6,
                       options=dict(ftol=1e-15, gtol=1e-12, maxiter=5000))
        assert res.utility >= -ref.fun - 1e-6


def test_apg_beats_epa_and_stays_feasible():
    ds = generate_dataset(CFG, 100, split=1)
    phi = ds.phi()
    wins = 0
    for p in range(ds.P):
        res = apg_solve(ds.beta[p], phi[p], CFG)
        assert se_core.is_feasible(res.Mu, CFG.N)
        assert np.all(np.diff(res.trace) >= 0)
        assert res.iters <= 300
        epa_u = se_core.Evaluator(ds.beta[p], phi[p], CFG).utility(se_core.epa(ds.M, ds.K_max, CFG.N))
        wins += res.utility >= epa_u
        assert res.utility == pytest.approx(float(se_core.Evaluator(ds.beta[p], phi[p], CFG).utility(res.Mu)),
                                            rel=1e-13)
    assert wins >= 95


def test_apg_residual_small():
    ds = generate_dataset(CFG, 10, split=1)
    phi = ds.phi()
    for p in range(ds.P):
        r0 = projected_gradient_residual(ds.beta[p], phi[p], se_core.epa(10, 4, CFG.N), CFG)
        res = apg_solve(ds.beta[p], phi[p], CFG, ApgConfig(max_iters=2000, tol=1e-12, patience=100))
        r = projected_gradient_residual(ds.beta[p], phi[p], res.Mu, CFG)
        assert r <= 1e-3 * r0


def test_apg_trace_csv(tmp_path):
    ds = generate_dataset(CFG, 1, split=1)
    res = apg_solve(ds.beta[0], ds.phi()[0], CFG, ApgConfig(max_iters=10))
    res.write_trace(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iter,utility"
    assert len(lines) == len(res.trace) + 1
    assert all("," in ln and ";" not in ln for ln in lines)


def test_apg_config_validation():
    with pytest.raises(ValueError):
        ApgConfig(max_iters=0)
    with pytest.raises(ValueError):
        ApgConfig(eta0=0.0)


def test_apg_padded_users_stay_zero():
    cfg = get_preset("mini-vark").scenario
    ds = generate_dataset(cfg, 10)
    phi = ds.phi()
    for p in range(ds.P):
        res = apg_solve(ds.beta[p], phi[p], cfg, ApgConfig(max_iters=50))
        assert np.all(res.Mu[:, ds.K_active[p]:] == 0)


def test_kernel_backend_selected():
    assert kernels.BACKEND in ("compiled", "python")
