"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Criteria 1, 6 and 8 share the session-wide toy and benchmark runs from
``conftest.py``. Criterion 7 needs a real hourly CSV, given through the
``CANF_LOAD_CSV`` environment variable, and is skipped otherwise.
"""

import json
import math
import os
from itertools import combinations

import numpy as np
import pytest

from canf.cli import main
from canf.evaluation import ScheduleAction, proportional_regret, select_action_from_samples
from canf.experiments import BenchmarkConfig, ToyConfig, run_benchmark, run_toy
from canf.flow import RealNvpFlow, flow_forward, flow_inverse, flow_nll_and_grad
from canf.gaussian import MultivariateGaussian
from canf.mixture import GaussianMixture, em_fit, gmm_condition, gmm_log_pdf, gmm_sample


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def random_mixture(rng, d, k):
    comps = []
    for _ in range(k):
        a = rng.normal(size=(d, d)) * 0.7
        comps.append(MultivariateGaussian(rng.normal(size=d) * 3, a @ a.T + 0.2 * np.eye(d)))
    return GaussianMixture(rng.dirichlet(np.ones(k)), comps)


def joint_density(m, pts):
    """Mixture density by direct dense algebra, independent of the package's factorizations."""
    total = np.zeros(len(pts))
    for w, c in zip(m.weights, m.components):
        inv = np.linalg.inv(c.covariance)
        diff = pts - c.mean
        q = np.einsum("ni,ij,nj->n", diff, inv, diff)
        total += w * np.exp(-0.5 * q) / np.sqrt(np.linalg.det(2 * np.pi * c.covariance))
    return total


def test_criterion_1_toy_kl(toy_run, capsys):
    report, _, elapsed = toy_run
    s = report["summary"]
    g, f, a = s["kl_gmm_mean"], s["kl_flow_mean"], s["kl_anf_mean"]
    ok = (s["n_ok"] == 10 and 0.12 <= g <= 0.18 and 0.06 <= f <= 0.12 and 0.08 <= a <= 0.14
          and f < a < g and elapsed < 15 * 60)
    verdict(capsys, 1, ok, f"KL gmm {g:.4f} flow {f:.4f} anf {a:.4f}, {s['n_ok']}/10 seeds, {elapsed:.0f}s")


def test_criterion_2_conditioning_oracle(capsys):
    rng = np.random.default_rng(2)
    grid = np.linspace(-40, 40, 1000)
    h = grid[1] - grid[0]
    worst = peak = 0.0
    for _ in range(50):
        m = random_mixture(rng, 2, int(rng.integers(1, 4)))
        x0 = float(m.mean()[0] + rng.normal() * 2)
        joint = joint_density(m, np.column_stack([np.full_like(grid, x0), grid]))
        numeric = joint / (joint.sum() * h)
        # probes drawn where the numeric conditional has mass
        probes = rng.choice(grid.size, 20, replace=False, p=numeric / numeric.sum())
        analytic = np.exp(gmm_log_pdf(gmm_condition(m, [x0], 1), grid[probes, None]))
        worst = max(worst, float(np.max(np.abs(analytic - numeric[probes]))))
        peak = max(peak, float(analytic.max()))
    verdict(capsys, 2, worst < 1e-6, f"max density error {worst:.2e} over 50 mixtures x 20 probes "
                                     f"(densities up to {peak:.2f})")


def test_criterion_3_flow_correctness(capsys):
    rng = np.random.default_rng(3)

    def randomized(dim, layers, hidden, scale):
        flow = RealNvpFlow.init(dim, layers, hidden, rng)
        for p in flow.params():
            p[...] = rng.normal(size=p.shape) * scale
        return flow

    flow = randomized(4, 4, (8, 8), 0.5)
    y = rng.uniform(-10, 10, size=(1000, 4))
    round_trip = float(np.max(np.abs(flow_inverse(flow, flow_forward(flow, y)[0]) - y)))

    worst_ld = 0.0
    for pt in rng.normal(size=(20, 4)):
        jac = np.empty((4, 4))
        for j in range(4):
            e = np.zeros(4)
            e[j] = 1e-6
            jac[:, j] = (flow_forward(flow, pt + e)[0] - flow_forward(flow, pt - e)[0]) / 2e-6
        num = np.linalg.slogdet(jac)[1]
        worst_ld = max(worst_ld, abs(flow_forward(flow, pt)[1] - num) / max(abs(num), 1.0))

    small = randomized(2, 1, (4,), 0.7)
    data = rng.normal(size=(16, 2))
    _, grads = flow_nll_and_grad(small, data)
    worst_g = 0.0
    for p, g in zip(small.params(), grads):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + 1e-6
            up = flow_nll_and_grad(small, data)[0]
            p[idx] = old - 1e-6
            down = flow_nll_and_grad(small, data)[0]
            p[idx] = old
            fd[idx] = (up - down) / 2e-6
        worst_g = max(worst_g, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8)))
    ok = round_trip < 1e-8 and worst_ld < 1e-3 and worst_g < 1e-3
    verdict(capsys, 3, ok, f"round trip {round_trip:.1e}, log-det rel {worst_ld:.1e}, grad rel {worst_g:.1e}")


def test_criterion_4_em_monotone(capsys):
    worst_drop, n_steps = 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d, k = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        true = random_mixture(rng, d, int(rng.integers(1, 4)))
        data = gmm_sample(true, int(rng.integers(100, 400)), seed)
        trace = np.asarray(em_fit(data, k, seed).log_likelihood_trace)
        steps = np.diff(trace)
        n_steps += steps.size
        worst_drop = max(worst_drop, float(-steps.min()) if steps.size else 0.0)
    verdict(capsys, 4, worst_drop <= 1e-9, f"largest per-step decrease {worst_drop:.1e} over {n_steps} EM steps")


def brute_force_action(samples, D, alpha):
    """Independent VaR search using Python sorting and tuple order."""
    idx = int(math.floor(alpha * (len(samples) - 1)))
    best, best_val = None, -math.inf
    for subset in combinations(range(samples.shape[1]), D):
        utils = sorted(-sum(float(row[j]) for j in subset) for row in samples)
        if utils[idx] > best_val:
            best, best_val = subset, utils[idx]
    return tuple(j + 1 for j in best)


def test_criterion_5_scheduler_equivalence(capsys):
    mismatches, cases = 0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        fd = random_mixture(rng, 8, int(rng.integers(1, 4)))
        samples = gmm_sample(fd, 100, seed)
        for K in range(1, 9):
            for D in range(1, min(4, K) + 1):
                cases += 1
                s = samples[:, :K]
                mismatches += select_action_from_samples(s, D, 0.2).indices != brute_force_action(s, D, 0.2)
    pr = proportional_regret([1.0, 2.0, 3.0, 4.0], ScheduleAction((3, 4)), 2)
    ok = mismatches == 0 and pr == 4 / 3
    verdict(capsys, 5, ok, f"{mismatches} mismatches in {cases} cases; worked regret {pr!r}")


def test_criterion_6_synthetic_benchmark(benchmark_run, capsys):
    report, _, elapsed = benchmark_run
    checks = report["checks"]
    counts = {k: sum(bool(c[k]) for c in checks)
              for k in ("rwse_canf_le_cg", "ll_canf_ge_cgmm", "score_canf_le_arma")}
    s = report["summary"]
    arma12, canf12 = s["arma"]["per_index_rwse_mean"][-1], s["canf"]["per_index_rwse_mean"][-1]
    ok = all(v >= 8 for v in counts.values()) and arma12 > canf12 and elapsed < 30 * 60
    verdict(capsys, 6, ok, f"seeds passing {counts}; index-12 RWSE arma {arma12:.4f} canf {canf12:.4f}; "
                           f"{elapsed:.0f}s")


def test_criterion_7_real_data(tmp_path, capsys):
    csv_path = os.environ.get("CANF_LOAD_CSV")
    if not csv_path:
        with capsys.disabled():
            print("\nACCEPTANCE 7: SKIP - optional; set CANF_LOAD_CSV to an hourly load CSV to run it")
        pytest.skip("CANF_LOAD_CSV not set")
    out = str(tmp_path)
    assert main(["fit", "--csv", csv_path, "--strategy", "cg", "--strategy", "cgmm", "--strategy", "canf",
                 "--out", out]) == 0
    bundles = [os.path.join(out, "models", s) for s in ("cg", "cgmm", "canf")]
    assert main(["evaluate", *bundles, "--csv", csv_path, "--out", out]) == 0
    with open(os.path.join(out, "reports", "comparison.json")) as fh:
        rows = {r["strategy"]: r["mean_ll"] for r in json.load(fh)["rows"]}
    ok = rows["canf"] >= max(rows["cg"], rows["cgmm"])
    verdict(capsys, 7, ok, f"mean LL {rows}")


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_criterion_8_determinism(toy_run, benchmark_run, tmp_path, capsys):
    toy_out, bench_out = toy_run[1], benchmark_run[1]
    # repeat seed 0 of each run and compare its per-seed files with the full run's
    run_toy(ToyConfig(seeds=(0,)), str(tmp_path / "toy"))
    run_benchmark(BenchmarkConfig(seeds=(0,)), str(tmp_path / "bench"))
    files = [(toy_out, tmp_path / "toy", "reports/toy_seed0.json"),
             (toy_out, tmp_path / "toy", "dumps/toy_grid_seed0.csv"),
             (bench_out, tmp_path / "bench", "reports/benchmark_seed0.json")]
    for s in BenchmarkConfig().strategies:
        for name in sorted(os.listdir(bench_out / "models" / f"seed0_{s}")):
            files.append((bench_out, tmp_path / "bench", f"models/seed0_{s}/{name}"))
    differ = [rel for a, b, rel in files if read(a / rel) != read(b / rel)]
    verdict(capsys, 8, not differ, f"{len(files) - len(differ)}/{len(files)} files byte-identical"
                                   + (f"; differ: {differ}" if differ else ""))
