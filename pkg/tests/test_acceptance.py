"""Acceptance gate.

Every test carries a ``criterion`` marker; ``conftest.py`` prints one PASS/FAIL line per
criterion after the run. Criteria 6 to 8 train networks at desk scale and take several
minutes each. Run directly with ``python3 tests/test_acceptance.py``.
"""
import json
import math
import time

import numpy as np
import pytest

from papc import autodiff as ad
from papc import se as se_core
from papc.cli import main as cli_main
from papc.config import ModelHyper, ScenarioConfig, get_preset
from papc.nn import Model
from papc.optim import Problem, utility_grad
from papc.scenario import generate_dataset, pilot_gram
from papc.serialization import checkpoint_from_bytes, read_dataset, read_dataset_header, write_dataset
from papc.trainer import TrainConfig, evaluate, train

from gradcheck import max_rel_error, numeric_grad
from oracles import dykstra_project, kkt_residual, se_scalar, sinr_scalar
from test_autodiff import PRIMITIVES, _loss, _make

criterion = pytest.mark.criterion
CFG = ScenarioConfig()


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


# ------------------------------------------------------------------ 1


@criterion(1, "SINR/SE match scalar-loop oracle to 1e-12 on 1000 instances (< 10 s)")
def test_c1_sinr_se_oracle(report):
    rng = np.random.default_rng(101)
    worst = 0.0
    shared = 0
    t0 = time.perf_counter()
    for _ in range(1000):
        M, K = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        B = 10 ** rng.uniform(-12, -6, size=(M, K))
        pilots = rng.integers(0, int(rng.integers(1, K + 1)), size=K)
        shared += len(set(pilots.tolist())) < K
        phi = pilot_gram(pilots, K, K)
        Mu = se_core.project_S(rng.uniform(0, 1, size=(M, K)), CFG.N)
        nu = se_core.mmse_variance(B, phi, CFG.zeta_p, CFG.tau_p)
        gam = se_core.sinr(B, phi, nu, Mu, CFG.zeta_d, CFG.N)
        se = se_core.spectral_efficiency(gam, CFG.tau, CFG.tau_p)
        g_ref = sinr_scalar(B.tolist(), phi.tolist(), Mu.tolist(), CFG.zeta_p, CFG.tau_p, CFG.zeta_d, CFG.N)
        se_ref = se_scalar(g_ref, CFG.tau, CFG.tau_p)
        worst = max(worst, _rel(gam, g_ref), _rel(se, se_ref))
    dt = time.perf_counter() - t0
    report(f"max rel err {worst:.2e}, {shared} instances with pilot sharing, {dt:.2f} s")
    assert shared > 100
    assert worst <= 1e-12
    assert dt < 10.0


# ------------------------------------------------------------------ 2


@criterion(2, "soft-min sandwich on 10000 SE vectors, including lambda = 50")
def test_c2_softmin_sandwich(report):
    rng = np.random.default_rng(202)
    gap_ratio = 0.0
    for i in range(10_000):
        K = int(rng.integers(1, 41))
        se = rng.uniform(0, rng.uniform(0.01, 20), size=K)
        lam = 50.0 if i % 2 else float(rng.uniform(0.1, 100))
        u = float(se_core.utility(se, lam))
        m = float(se.min())
        assert m <= u <= m + math.log(K) / lam
        if K > 1:
            gap_ratio = max(gap_ratio, (u - m) / (math.log(K) / lam))
    report(f"largest (u - min) / (ln K / lambda) = {gap_ratio:.4f}")


# ------------------------------------------------------------------ 3


@criterion(3, "clamp-then-scale projection vs KKT/Dykstra to 1e-9, idempotent, nonexpansive")
def test_c3_projection(report):
    rng = np.random.default_rng(303)
    worst_d = worst_k = 0.0
    for dim in range(2, 9):
        n = 10_000 // 7 + (1 if dim == 2 else 0)
        N = int(rng.integers(1, 9))
        X = rng.normal(0, 1, size=(n, dim)) * rng.uniform(0.01, 3, size=(n, 1))
        P = se_core.project_S(X, N)
        D = dykstra_project(X, 1 / math.sqrt(N))
        worst_d = max(worst_d, float(np.abs(P - D).max()))
        worst_k = max(worst_k, max(kkt_residual(x, z, 1 / math.sqrt(N)) for x, z in zip(X, P)))
        assert np.array_equal(se_core.project_S(P, N), P)
        Y = X + rng.normal(0, 0.3, size=X.shape)
        Q = se_core.project_S(Y, N)
        lhs = np.linalg.norm(P - Q, axis=1)
        rhs = np.linalg.norm(X - Y, axis=1)
        assert np.all(lhs <= rhs * (1 + 1e-12))
    report(f"max |P - Dykstra| {worst_d:.1e}, max KKT violation {worst_k:.1e}")
    assert worst_d <= 1e-9
    assert worst_k <= 1e-9


# ------------------------------------------------------------------ 4


def _network_check(kind, hyper, scen, seed=7):
    m = Model.create(kind, hyper, seed=seed)
    ds = generate_dataset(scen, 3)
    B, phi = ds.beta, ds.phi()
    nu = se_core.mmse_variance(B, phi, scen.zeta_p, scen.tau_p)

    def run(override=None):
        tape = ad.Tape()
        if override is None:
            nodes = m.bind(tape)
        else:
            nodes = {k: tape.constant(override.get(k, v)) for k, v in m.params.items()}
        Mu = m.forward(tape, nodes, B, phi, scen.N, "scale")
        return tape, nodes, ad.neg(ad.mean_batch(se_core.utility_node(Mu, B, phi, nu, scen)))

    tape, nodes, loss = run()
    tape.backward(loss)
    worst = 0.0
    for name in m.params:
        num = numeric_grad(lambda x: float(run({name: x})[2].value[0, 0]), m.params[name], h=1e-4)
        worst = max(worst, max_rel_error(nodes[name].grad, num))
    return worst


@criterion(4, "finite differences vs autodiff to 1e-5: primitives, utility, PAPC, FCN (< 2 min)")
def test_c4_gradients(report):
    t0 = time.perf_counter()
    prim = 0.0
    for name, (fn, shapes) in sorted(PRIMITIVES.items()):
        arrays = [_make(s) for s in shapes]
        tape, nodes, loss = _loss(fn, arrays)
        tape.backward(loss)
        for i, a in enumerate(arrays):
            def f(x, i=i):
                args = list(arrays)
                args[i] = x
                return float(_loss(fn, args, leaves=False)[2].value.reshape(-1)[0])

            prim = max(prim, max_rel_error(nodes[i].grad, numeric_grad(f, a, h=1e-4)))

    rng = np.random.default_rng(404)
    util = 0.0
    for _ in range(10):
        M, K = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        B = 10 ** rng.uniform(-10, -7, size=(M, K))
        phi = pilot_gram(rng.integers(0, max(1, K - 1), size=K), K, K)
        Mu = se_core.project_S(rng.uniform(0.05, 1.0, size=(M, K)), CFG.N)
        prob = Problem(B, phi, CFG)
        num = numeric_grad(lambda x: prob.utility(np.ascontiguousarray(x)), Mu, h=1e-5)
        util = max(util, max_rel_error(utility_grad(B, phi, Mu, CFG), num),
                   max_rel_error(prob.utility_grad(Mu)[1], num))

    scen = ScenarioConfig(M=6, K_max=3, tau_p=2, area_km2=0.006)
    h = ModelHyper(M=6, K_max=3, M_bar=10, H=2, L=2, d_mod=10)
    papc = _network_check("papc", h, scen)
    fcn = _network_check("fcn", h.replace(M_hat=12), scen)
    dt = time.perf_counter() - t0
    report(f"primitives {prim:.1e}, utility {util:.1e}, PAPC {papc:.1e}, FCN {fcn:.1e}, {dt:.0f} s")
    assert max(prim, util, papc, fcn) <= 1e-5
    assert dt < 120.0


# ------------------------------------------------------------------ 5


@criterion(5, "PAPC invariants: equivariance, padded zeros, attention rows, feasibility, phi sensitivity")
def test_c5_structure(report):
    pre = get_preset("mini-vark")
    scen, h = pre.scenario, pre.hyper.replace(offset=0.0)
    ds = generate_dataset(scen, 100)
    phi = ds.phi()
    rng = np.random.default_rng(505)
    worst_eq = worst_att = 0.0
    changed = 0
    for p in range(ds.P):
        m = Model.create("papc", h, seed=p)
        B, F = ds.beta[p], phi[p]
        trace = {}
        out = m.predict(B, F, scen.N, trace=trace)
        assert se_core.is_feasible(out, scen.N)
        assert np.all(out[:, ds.K_active[p]:] == 0.0)
        worst_att = max(worst_att, max(float(np.abs(A.sum(axis=-1) - 1).max()) for A in trace["attention"]))
        perm = rng.permutation(scen.K_max)
        out_p = m.predict(B[:, perm], F[np.ix_(perm, perm)], scen.N)
        worst_eq = max(worst_eq, float(np.abs(out_p - out[:, perm]).max()))
        flipped = F.copy()
        flipped[0, 1] = flipped[1, 0] = 1.0 - F[0, 1]
        changed += not np.array_equal(out, m.predict(B, flipped, scen.N))
    report(f"equivariance {worst_eq:.1e}, attention row-sum {worst_att:.1e}, phi-sensitive {changed}/100")
    assert worst_eq <= 1e-12
    assert worst_att <= 1e-12
    assert changed >= 99


# ------------------------------------------------------------------ 6 and 9


@pytest.fixture(scope="module")
def scenario0_run():
    pre = get_preset("scenario0")
    sc = pre.scenario
    tr = generate_dataset(sc, 20_000, split=0)
    te = generate_dataset(sc, 2_000, split=1)
    res = train(TrainConfig(), sc, pre.hyper, tr)
    return {
        "model": res.model, "test": te, "scenario": sc, "train_s": res.seconds,
        "papc": evaluate(res.model, te, sc).summary()["mean_utility"],
        "epa": evaluate("epa", te, sc).summary()["mean_utility"],
        "apg": evaluate("apg", te, sc).summary()["mean_utility"],
    }


@pytest.mark.slow
@criterion(6, "scenario 0 desk-scale training: EPA < PAPC <= APG, >= 50% of gap closed")
def test_c6_training_efficacy(scenario0_run, report):
    r = scenario0_run
    closed = (r["papc"] - r["epa"]) / (r["apg"] - r["epa"])
    report(f"EPA {r['epa']:.4f}, PAPC {r['papc']:.4f}, APG {r['apg']:.4f}, gap closed {closed:.1%}, "
           f"train {r['train_s']:.0f} s")
    assert r["epa"] < r["papc"] <= r["apg"]
    assert closed >= 0.5
    assert r["train_s"] < 3600


@pytest.mark.slow
@criterion(9, "single-threaded per-sample run time: EPA < PAPC < APG")
def test_c9_runtime_ordering(scenario0_run, tmp_path, report):
    ck, data, out = tmp_path / "m.ck", tmp_path / "te.bin", tmp_path / "bench.json"
    scenario0_run["model"].save(ck)
    write_dataset(data, scenario0_run["test"])
    rc = cli_main(["bench", "--preset", "scenario0", "--checkpoint", str(ck), "--dataset", str(data),
                   "--repetitions", "5", "--samples", "50", "--scaling-k", "", "--out", str(out)])
    rep = json.loads(out.read_text())
    t = rep["median_seconds_per_sample"]
    report(f"EPA {t['epa']:.1e} s, PAPC {t['papc']:.1e} s, APG {t['apg']:.1e} s, "
           f"threads {rep['threads'].get('OMP_NUM_THREADS')}")
    assert rep["threads"]["OMP_NUM_THREADS"] == "1"
    assert rep["ordering_ok"] and rc == 0


# ------------------------------------------------------------------ 7 and 8


@pytest.fixture(scope="module")
def mini_data():
    sc = get_preset("mini").scenario
    return generate_dataset(sc, 20_000, split=0), generate_dataset(sc, 2_000, split=1)


@pytest.fixture(scope="module")
def mini_papc(mini_data):
    pre = get_preset("mini")
    tr, te = mini_data
    res = train(TrainConfig(), pre.scenario, pre.hyper, tr)
    return evaluate(res.model, te, pre.scenario).summary()["mean_utility"], res.model


@pytest.mark.slow
@criterion(7, "contaminated mini network: trained PAPC beats equal-parameter FCN")
def test_c7_pilot_contamination(mini_data, mini_papc, report):
    pre = get_preset("mini")
    tr, te = mini_data
    papc_u, papc_model = mini_papc
    res = train(TrainConfig(model="fcn"), pre.scenario, pre.hyper, tr)
    fcn_u = evaluate(res.model, te, pre.scenario).summary()["mean_utility"]
    epa_u = evaluate("epa", te, pre.scenario).summary()["mean_utility"]
    ratio = res.model.n_params() / papc_model.n_params()
    report(f"PAPC {papc_u:.4f}, FCN {fcn_u:.4f}, EPA {epa_u:.4f}, FCN/PAPC params {ratio:.3f}")
    assert abs(ratio - 1) < 0.05
    assert papc_u > fcn_u


@pytest.mark.slow
@criterion(8, "varying-K model (K in [4, 8]) within 10% of fixed K = 8 model")
def test_c8_varying_k(mini_data, mini_papc, report):
    pre = get_preset("mini")
    tr, te = mini_data
    fixed_u, _ = mini_papc
    res = train(TrainConfig(varying_k=True, K_min=4, K_max=8), pre.scenario, pre.hyper, tr)
    vark_u = evaluate(res.model, te, pre.scenario).summary()["mean_utility"]
    report(f"varying-K {vark_u:.4f}, fixed-K {fixed_u:.4f}, ratio {vark_u / fixed_u:.3f}")
    assert abs(vark_u - fixed_u) <= 0.1 * fixed_u


# ------------------------------------------------------------------ 10


@criterion(10, "dataset and checkpoint write-read-write bit-identical; headers match presets")
@pytest.mark.parametrize("name,M,K,tau_p,M_bar,H,L,d_mod", [
    ("scenario0", 10, 4, 20, 80, 5, 3, 16),
    ("scenario2", 100, 40, 20, 500, 5, 3, 100),
])
def test_c10_roundtrip(tmp_path, report, name, M, K, tau_p, M_bar, H, L, d_mod):
    pre = get_preset(name)
    ds = generate_dataset(pre.scenario, 20)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    write_dataset(a, ds)
    write_dataset(b, read_dataset(a))
    assert a.read_bytes() == b.read_bytes()
    hdr = read_dataset_header(a)
    assert (hdr["M"], hdr["K_max"], hdr["P"], hdr["tau_p"]) == (M, K, 20, tau_p)

    m = Model.create("papc", pre.hyper, seed=3)
    ca, cb = tmp_path / "a.ck", tmp_path / "b.ck"
    m.save(ca)
    Model.load(ca).save(cb)
    assert ca.read_bytes() == cb.read_bytes()
    kind, header, flat = checkpoint_from_bytes(ca.read_bytes())
    assert (kind, *header) == (0, M, K, M_bar, H, L, d_mod)
    assert np.array_equal(flat, m.flat())
    report(f"{name}: {a.stat().st_size} B dataset, {ca.stat().st_size} B checkpoint")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
