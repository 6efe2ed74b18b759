"""Acceptance criteria.  Every test prints one PASS/FAIL (or DEVIATION) line."""
import json
import math
import time

import numpy as np
import pytest
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from conftest import CENTERED_WIDTH, CONFIGS
from oracles import random_sector_hurwitz, rhs_entry
from polyfeedback import cli, harness
from polyfeedback import tensors as tn
from polyfeedback.control import control_distance, replay_full, simulate_closed_loop
from polyfeedback.openloop import ArmijoParams, DiscreteProblem, optimize
from polyfeedback.projection import project
from polyfeedback.reduction import ReducedModel, balance_truncate, gramians, select_order
from polyfeedback.riccati import solve_care

pytestmark = pytest.mark.slow

BETA = 1e-4


@pytest.fixture
def verdict(capsys):
    def emit(label, ok, detail, status=None):
        status = status or ("PASS" if ok else "FAIL")
        with capsys.disabled():
            print(f"\n[{status}] {label}: {detail}")
    return emit


@pytest.fixture(scope="module")
def r9(pipeline):
    red = pipeline.reduced(9)
    ric = solve_care(red.A, red.B, red.C, BETA)
    return red, ric, tn.feedback_tensors(red, ric, 6)


@pytest.fixture(scope="module")
def model_2d():
    cfg = harness.load_config(CONFIGS / "test_case_4.json")
    model = harness.build_model(cfg)
    proj = project(model)
    pair = gramians(proj, cfg.reduction.gramian_eps, cfg.reduction.max_iter)
    return cfg, model, proj, pair


def _centered_y0(pipeline, red, scale=1.0):
    y0n = pipeline.y0("gaussian", center=[0.0], width=CENTERED_WIDTH)
    return scale * pipeline.reduced_state(red, y0n)


# --------------------------------------------------------------------------

def test_c1_tensor_solver_oracle(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, worst2 = 0.0, 0.0
    for i in range(20):
        r = 2 + i % 4
        k = 2 + i % 3
        A = random_sector_hurwitz(rng, r)
        rhs = tn.symmetrize(rng.standard_normal((r,) * k))
        T = tn.solve_gen_lyapunov(A, rhs)
        ref = tn.solve_gen_lyapunov_direct(A, rhs)
        worst = max(worst, np.abs(T - ref).max() / np.abs(ref).max())
        if k == 2:
            lyap = sla.solve_continuous_lyapunov(A.T, rhs)
            worst2 = max(worst2, np.abs(T - lyap).max() / np.abs(lyap).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and worst2 <= 1e-8 and elapsed < 60
    verdict("C1 tensor solver vs direct Kronecker solve", ok,
            f"max rel err {worst:.2e} (<=1e-6), k=2 vs Lyapunov {worst2:.2e} (<=1e-8), "
            f"{elapsed:.1f}s (<60s)")
    assert ok


def test_c2_riccati(pipeline, model_2d, verdict):
    scalar = solve_care([[-1.0]], [[1.0]], [[1.0]], 1.0).Pi[0, 0]
    err = abs(scalar - (math.sqrt(2) - 1))
    cases = [("1D r=9", pipeline.reduced(9)), ("1D r=21", pipeline.reduced(21))]
    _, _, proj, pair = model_2d
    cases.append(("2D r=47", balance_truncate(pair.X, pair.Y, proj, r=47)))
    parts, ok = [f"scalar err {err:.1e}"], err <= 1e-12
    for label, red in cases:
        for beta in (1e-3, 1e-5):
            sol = solve_care(red.A, red.B, red.C, beta)
            hurwitz = np.linalg.eigvals(sol.A_cl).real.max() < 0
            ok &= sol.residual <= 1e-9 and hurwitz
            parts.append(f"{label} beta={beta:g}: res {sol.residual:.1e}"
                         + ("" if hurwitz else " NOT Hurwitz"))
    verdict("C2 Riccati residual <= 1e-9 and Hurwitz closed loop", ok, "; ".join(parts))
    assert ok


def test_c3_generalized_lyapunov_identity(r9, verdict):
    red, ric, law = r9
    rng = np.random.default_rng(3)
    parts, ok = [], True
    for k in range(2, 6):
        T = law.tensors[k]
        lhs_t = tn.kron_sum_apply(ric.A_cl, T)
        worst = 0.0
        for _ in range(100):
            zs = [rng.standard_normal(red.r) for _ in range(k)]
            lhs = tn.evaluate(lhs_t, *zs)
            if k == 2:
                # quadratic case: the Riccati equation written with A_cl
                rhs = -tn.evaluate(ric.Pi @ red.B @ red.B.T @ ric.Pi / BETA + red.C.T @ red.C,
                                   *zs)
            else:
                rhs = sum(rhs_entry(k, law.tensors, Nj, red.B[:, j], zs)
                          for j, Nj in enumerate(red.N)) / (2 * BETA)
            scale = max(abs(rhs), np.abs(lhs_t).max() * np.prod([np.linalg.norm(z) for z in zs]))
            worst = max(worst, abs(lhs - rhs) / scale)
        ok &= worst <= 1e-6
        parts.append(f"k={k}: {worst:.1e}")
    verdict("C3 tensor equation identity on 100 random tuples (r=9)", ok,
            ", ".join(parts) + " (<=1e-6)")
    assert ok


def test_c4_mass_conservation(pipeline, r9, model_2d, verdict):
    parts, worst = [], 0.0
    red, _, law = r9
    for name in ("test_case_1", "test_case_2", "test_case_3"):
        cfg = harness.load_config(CONFIGS / f"{name}.json")
        rho0, _ = harness.initial_density(cfg, pipeline.model)
        y0n = rho0 - pipeline.model.rho_inf
        tr = simulate_closed_loop(red, law.truncate(3), pipeline.reduced_state(red, y0n),
                                  cfg.horizon)
        if tr.diverged:
            tr = simulate_closed_loop(red, law.truncate(2), pipeline.reduced_state(red, y0n),
                                      cfg.horizon)
        drift = replay_full(pipeline.model, tr, y0n, cfg.horizon).extra["mass_drift"]
        worst = max(worst, drift)
        parts.append(f"{name} {drift:.1e}")
    _, model, proj, pair = model_2d
    red2 = balance_truncate(pair.X, pair.Y, proj, r=47)
    for name in ("test_case_4", "test_case_5"):
        cfg = harness.load_config(CONFIGS / f"{name}.json")
        rho0, _ = harness.initial_density(cfg, model)
        y0n = rho0 - model.rho_inf
        beta = cfg.law.betas[0]
        ric = solve_care(red2.A, red2.B, red2.C, beta)
        law2 = tn.FeedbackLaw(beta, {2: ric.Pi}, red2.N, red2.B)
        y0r = red2.W.T @ proj.project_state(y0n)
        tr = simulate_closed_loop(red2, law2, y0r, cfg.horizon)
        drift = replay_full(model, tr, y0n, cfg.horizon).extra["mass_drift"]
        worst = max(worst, drift)
        parts.append(f"{name} {drift:.1e}")
    ok = worst <= 1e-9
    verdict("C4 mass conservation in full-model replays", ok, ", ".join(parts) + " (<=1e-9)")
    assert ok


def test_c5_reduction_fidelity(pipeline, verdict):
    proj, model = pipeline.proj, pipeline.model
    red = pipeline.reduced(proj.dim)
    y0n = pipeline.y0("gaussian", center=[0.0], width=CENTERED_WIDTH)
    z0 = red.W.T @ proj.project_state(y0n)
    u = lambda t: np.array([0.5 * np.sin(2 * t) * np.exp(-0.1 * t)])  # noqa: E731
    T = 5.0
    ts = np.linspace(0.0, T, 201)
    full = replay_full(model, u, y0n, T, rtol=1e-11, atol=1e-14, samples=ts.size)
    N = red.N[0]

    def rhs(t, z):
        return red.A @ z + u(t)[0] * (N @ z) + red.B[:, 0] * u(t)[0]

    sol = solve_ivp(rhs, (0.0, T), z0, method="BDF", rtol=1e-11, atol=1e-14,
                    jac=lambda t, z: red.A + u(t)[0] * N, t_eval=ts)
    out_red = np.sum((red.C @ sol.y) ** 2, axis=0)
    err = np.abs(np.sqrt(out_red) - np.sqrt(full.output_sq)).max() / np.sqrt(full.output_sq).max()
    ok = err <= 1e-8
    verdict("C5 r=n-1 reproduces the full output", ok, f"max rel output error {err:.1e} (<=1e-8)")

    sigma = pipeline.reduced(9).sigma
    r3, r6 = select_order(sigma, 1e-3), select_order(sigma, 1e-6)
    ok3, ok6 = abs(r3 - 9) <= 2, abs(r6 - 21) <= 2
    verdict("C5 order at threshold 1e-3", ok3, f"r={r3} vs 9 (+-2)",
            None if ok3 else "DEVIATION")
    verdict("C5 order at threshold 1e-6", ok6, f"r={r6} vs 21 (+-2); calibrated potential, "
            "documented deviation", None if ok6 else "DEVIATION")
    assert ok


def test_c6_suboptimality_order(pipeline, r9, verdict):
    red, _, law = r9
    T, nodes = 20.0, 2000
    scales = [1.0, 0.5, 0.25, 0.125]
    gaps = {2: [], 3: []}
    t0 = time.perf_counter()
    for s in scales:
        y0 = _centered_y0(pipeline, red, s)
        params = ArmijoParams(T=T, nodes=nodes, delta=1e-7 * s, max_iter=20000)
        prob = DiscreteProblem(red, y0, BETA, params.t)
        trs = {p: simulate_closed_loop(red, law.truncate(p), y0, T, samples=nodes)
               for p in (2, 3, 6)}
        best = optimize(red, y0, params, BETA, trs[6].u)
        for p in gaps:
            gaps[p].append(prob.cost(trs[p].u) - best.cost)
    elapsed = time.perf_counter() - t0
    ok, parts = elapsed < 600, []
    for p, g in gaps.items():
        g = np.array(g)
        slope = np.polyfit(np.log(scales), np.log(g), 1)[0] if np.all(g > 0) else float("nan")
        ok &= slope >= p + 0.5
        parts.append(f"p={p}: slope {slope:.2f} (>= {p + 0.5})")
    verdict("C6 suboptimality order", ok, ", ".join(parts) + f", {elapsed:.0f}s (<600s)")
    assert ok


def test_c7_gradient(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(10):
        r, m = 3 + i % 3, 1 + i % 2
        A = rng.standard_normal((r, r)) - 3 * np.eye(r)
        red = ReducedModel(A, [0.3 * rng.standard_normal((r, r)) for _ in range(m)],
                           rng.standard_normal((r, m)), rng.standard_normal((2, r)),
                           np.eye(r), np.eye(r), np.ones(r))
        t = np.linspace(0.0, 2.0, 81)
        prob = DiscreteProblem(red, rng.standard_normal(r), 10.0 ** -(1 + i % 3), t)
        u = 0.5 * rng.standard_normal((t.size, m))
        _, g = prob.cost_and_gradient(u)
        v = rng.standard_normal(u.shape)
        h = 1e-5
        fd = (prob.cost(u + h * v) - prob.cost(u - h * v)) / (2 * h)
        worst = max(worst, abs(prob.inner(g, v) - fd) / abs(fd))
    A = np.array([[-1.0, 0.5], [0.0, -2.0]])
    B = np.array([[1.0], [1.0]])
    red = ReducedModel(A, [np.zeros((2, 2))], B, np.eye(2), np.eye(2), np.eye(2), np.ones(2))
    y0 = np.array([1.0, -0.5])
    it = optimize(red, y0, ArmijoParams(T=20.0, nodes=4001, delta=1e-6, C=5.0), 0.5)
    ref = 0.5 * y0 @ solve_care(A, B, np.eye(2), 0.5).Pi @ y0
    lq = abs(it.cost - ref) / ref
    ok = worst <= 1e-4 and lq <= 1e-4
    verdict("C7 adjoint gradient and LQ optimum", ok,
            f"max FD rel err {worst:.1e} (<=1e-4), LQ cost rel err {lq:.1e} (<=1e-4)")
    assert ok


def test_c8_qualitative_tables(pipeline, verdict):
    red = pipeline.reduced(9)
    cfg = harness.load_config(CONFIGS / "test_case_2.json")
    T, nodes = cfg.horizon, cfg.nodes
    ric = solve_care(red.A, red.B, red.C, BETA)
    law = tn.feedback_tensors(red, ric, 6)
    y0 = _centered_y0(pipeline, red)
    params = harness.armijo_params(cfg)
    prob = DiscreteProblem(red, y0, BETA, params.t)
    trs = {p: simulate_closed_loop(red, law.truncate(p), y0, T, samples=nodes)
           for p in range(2, 7)}
    J = {p: prob.cost(tr.u) for p, tr in trs.items()}
    best = min(J, key=J.get)
    opt = optimize(red, y0, params, BETA, trs[best].u)
    dist = {p: control_distance(params.t, trs[p].u, opt.u) for p in (2, 6)}
    gain = (J[2] - J[3]) / J[2]
    ratio = dist[6] / dist[2]
    ok_tab = gain >= 0.05 and ratio <= 1 / 3
    verdict("C8 test case 2 pattern (beta=1e-4)", ok_tab,
            f"J(u2)={J[2]:.4f} J(u3)={J[3]:.4f} gain {100 * gain:.1f}% (>=5%), "
            f"|u6-uopt|/|u2-uopt| = {dist[6]:.2f}/{dist[2]:.2f} = {ratio:.3f} (<=1/3)")

    cfg3 = harness.load_config(CONFIGS / "test_case_3.json")
    rho0, _ = harness.initial_density(cfg3, pipeline.model)
    y3 = pipeline.reduced_state(red, rho0 - pipeline.model.rho_inf)
    pattern = {}
    for beta in (max(cfg3.law.betas), 1e-4, min(cfg3.law.betas)):
        law3 = tn.feedback_tensors(red, solve_care(red.A, red.B, red.C, beta), cfg3.law.p_max)
        pattern[beta] = [p for p in range(2, cfg3.law.p_max + 1)
                         if simulate_closed_loop(red, law3.truncate(p), y3, cfg3.horizon,
                                                 samples=cfg3.nodes).diverged]
    # infinite entries appear for small beta and high degree, not for large beta
    ok_div = bool(pattern[min(pattern)]) and not pattern[max(pattern)]
    verdict("C8 test case 3 infinite-cost entries", ok_div,
            "; ".join(f"beta={b:g}: inf for p in {v}" for b, v in pattern.items()))
    assert ok_tab and ok_div


def test_c9_determinism(tmp_path, verdict):
    data = json.loads((CONFIGS / "test_case_1.json").read_text())
    outs = []
    for i in range(2):
        d = tmp_path / f"run{i}"
        d.mkdir()
        data["output_dir"] = str(d / "out")
        path = d / "cfg.json"
        path.write_text(json.dumps(data))
        assert cli.main(["experiment", str(path)]) == 0
        outs.append(d / "out")
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    other = sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.is_file())
    same = files == other and all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
                                  for f in files)
    verdict("C9 byte-identical reports from two runs", same, f"{len(files)} files compared")
    assert same
