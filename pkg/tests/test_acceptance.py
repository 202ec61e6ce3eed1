"""Acceptance criteria: desk-scale replication bands and the property suite.

Each criterion prints one PASS/FAIL line.  The replication studies run at the
stated settings (N=45, 100 replications, MCMC 26,000/6,000/10) and are shared
across criteria through module-scoped fixtures.
"""

import json
import numpy as np
import pytest
from dataclasses import replace
from scipy import optimize

from twfepanel import cli
from twfepanel import corrections as corr
from twfepanel import effects as apem
from twfepanel import estimation as est
from twfepanel import families as fam
from twfepanel import likelihood as lik
from twfepanel import mcmc
from twfepanel import montecarlo as mc

from conftest import random_panel

pytestmark = pytest.mark.acceptance

SETTINGS = mc.StudySettings(iterations=26_000, burn_in=6_000, thinning=10,
                            pilot_iterations=5_000, workers=2)
FAST = mc.StudySettings(workers=2)


def _report(name, ok, detail):
    print(f"criterion {name}: {'PASS' if ok else 'FAIL'} — {detail}")
    return ok


@pytest.fixture(scope="module")
def static_logit_study():
    dgp, _ = mc.preset("table3-static-logit", replications=100)
    return mc.run_study(dgp, ("uncorrected", "prior-SE", "penalty-SE"), SETTINGS)


@pytest.fixture(scope="module")
def dynamic_logit_study():
    dgp, _ = mc.preset("table3-dynamic-logit", replications=100)
    return mc.run_study(dgp, ("uncorrected", "prior-PE", "se-ac"), SETTINGS)


@pytest.fixture(scope="module")
def ordered_study():
    dgp, _ = mc.preset("table2-static-ordered-logit", replications=100)
    return mc.run_study(dgp, ("uncorrected", "penalty-GE1"), FAST)


@pytest.fixture(scope="module")
def mnl_study():
    dgp, _ = mc.preset("table4-dynamic-multinomial-logit", replications=100)
    return mc.run_study(dgp, ("uncorrected", "prior-PML"), SETTINGS)


@pytest.fixture(scope="module")
def probit_study():
    dgp, _ = mc.preset("table5-dynamic-probit", n_periods=45, replications=100)
    return mc.run_study(dgp, ("uncorrected", "prior-GE1"), SETTINGS)


def test_criterion_1_static_logit(static_logit_study):
    t = static_logit_study
    unc = t.lookup("beta:z", "uncorrected")["bias_pct"]
    pr = t.lookup("beta:z", "prior-SE")
    pe = t.lookup("beta:z", "penalty-SE")
    checks = [
        ("uncorrected bias in 10.1±4", 6.1 <= unc <= 14.1, f"{unc:.1f}%"),
        ("prior SE |bias| < 3", abs(pr["bias_pct"]) < 3, f"{pr['bias_pct']:.1f}%"),
        ("penalty SE |bias| < 3", abs(pe["bias_pct"]) < 3, f"{pe['bias_pct']:.1f}%"),
        ("prior SE coverage >= 0.90", pr["coverage_95"] >= 0.90,
         f"{pr['coverage_95']:.2f}"),
        ("penalty SE coverage >= 0.90", pe["coverage_95"] >= 0.90,
         f"{pe['coverage_95']:.2f}"),
    ]
    ok = all(c[1] for c in checks)
    _report("1 (static logit)", ok,
            "; ".join(f"{c[0]}: {c[2]}" for c in checks))
    assert ok, checks


def test_criterion_2_dynamic_logit(dynamic_logit_study):
    t = dynamic_logit_study
    unc = t.lookup("beta:ylag1", "uncorrected")["bias_pct"]
    pe = t.lookup("beta:ylag1", "prior-PE")["bias_pct"]
    ac = t.lookup("beta:ylag1", "se-ac")["bias_pct"]
    ape_unc = t.lookup("ape:ylag1", "uncorrected")["bias_pct"]
    ape_pe = t.lookup("ape:ylag1", "prior-PE")["bias_pct"]
    ape_ac = t.lookup("ape:ylag1", "se-ac")["bias_pct"]
    ratio = max(abs(ape_pe), abs(ape_ac)) / abs(ape_unc)
    checks = [
        ("uncorrected beta_Y in -64.1±6", -70.1 <= unc <= -58.1, f"{unc:.1f}%"),
        ("prior PE in (-20,-5)", -20 < pe < -5, f"{pe:.1f}%"),
        ("prior SE+AC |bias| < 10", abs(ac) < 10, f"{ac:.1f}%"),
        ("corrected APE < uncorrected/3", ratio < 1 / 3,
         f"PE {ape_pe:.1f}% / AC {ape_ac:.1f}% vs unc {ape_unc:.1f}%"),
    ]
    ok = all(c[1] for c in checks)
    _report("2 (dynamic logit)", ok, "; ".join(f"{c[0]}: {c[2]}" for c in checks))
    assert ok, checks


def test_criterion_3_ordered_logit(ordered_study):
    t = ordered_study
    unc2 = t.lookup("beta:tau2", "uncorrected")["bias_pct"]
    tau2 = t.lookup("beta:tau2", "penalty-GE1")["bias_pct"]
    bz = t.lookup("beta:z", "penalty-GE1")["bias_pct"]
    checks = [
        ("penalty GE-1 |tau2 bias| < 6", abs(tau2) < 6,
         f"{tau2:.1f}% (uncorrected {unc2:.1f}%)"),
        ("penalty GE-1 |beta_Z bias| < 3", abs(bz) < 3, f"{bz:.1f}%"),
    ]
    ok = all(c[1] for c in checks)
    _report("3 (static ordered logit)", ok,
            "; ".join(f"{c[0]}: {c[2]}" for c in checks))
    assert ok, checks


def test_criterion_4_multinomial_logit(mnl_study):
    t = mnl_study
    unc = t.lookup("beta:ylag1:cat2", "uncorrected")["bias_pct"]
    pml = t.lookup("beta:ylag1:cat2", "prior-PML")["bias_pct"]
    checks = [
        ("uncorrected beta_Y(cat2) in -60.6±8", -68.6 <= unc <= -52.6,
         f"{unc:.1f}%"),
        ("prior PML in (-15,0)", -15 < pml < 0, f"{pml:.1f}%"),
    ]
    ok = all(c[1] for c in checks)
    _report("4 (dynamic multinomial logit)", ok,
            "; ".join(f"{c[0]}: {c[2]}" for c in checks))
    assert ok, checks


def test_criterion_5_probit(probit_study):
    t = probit_study
    ge = t.lookup("beta:ylag1", "prior-GE1")
    checks = [
        ("prior GE-1 |beta_Y bias| < 6", abs(ge["bias_pct"]) < 6,
         f"{ge['bias_pct']:.1f}%"),
        ("prior GE-1 coverage >= 0.90", ge["coverage_95"] >= 0.90,
         f"{ge['coverage_95']:.2f}"),
    ]
    ok = all(c[1] for c in checks)
    _report("5 (dynamic probit T=45)", ok,
            "; ".join(f"{c[0]}: {c[2]}" for c in checks))
    assert ok, checks


# ---------------------------------------------------------------------------
# criterion 6: property suite (no replication budget)
# ---------------------------------------------------------------------------


def test_criterion_6a_differential_system(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 4, 4, seed=17)
    state = lik.ParamState(beta=rng.normal(0, 0.4, 1),
                           alpha=rng.normal(0, 0.3, 4),
                           gamma=rng.normal(0, 0.3, 4))
    se = corr.verify_differential_system(corr.CorrectionSpec(kind="SE"),
                                         data, family, state)
    ge = corr.verify_differential_system(corr.CorrectionSpec(kind="GE1",
                                                             trim_lag=1),
                                         data, family, state)
    ok_se = max(se["max_alpha"], se["max_gamma"], se["max_beta"]) < 1e-8
    ok_ge = max(ge["max_alpha"], ge["max_gamma"]) < 1e-6
    _report("6a (differential system)", ok_se and ok_ge,
            f"SE {se['max_alpha']:.1e}, GE-1 {ge['max_alpha']:.1e}")
    assert ok_se and ok_ge


def test_criterion_6b_gradient_exactness(rng):
    from dataclasses import replace as dreplace
    family = fam.ModelFamily(kind="probit")
    data = random_panel(family, 4, 4, seed=8)
    state = lik.ParamState(beta=rng.normal(0, 0.3, 1),
                           alpha=rng.normal(0, 0.3, 4),
                           gamma=rng.normal(0, 0.3, 4))
    worst = 0.0
    # likelihood score against central differences
    jd = lik.joint_derivatives(data, family, state)
    h = 1e-6
    for j in range(1):
        bp, bm = state.beta.copy(), state.beta.copy()
        bp[j] += h
        bm[j] -= h
        fd = (lik.joint_loglik(data, family, dreplace(state, beta=bp))
              - lik.joint_loglik(data, family, dreplace(state, beta=bm))) / (2 * h)
        worst = max(worst, abs(jd.score_beta[j] - fd) / max(abs(fd), 1.0))
    # every prior/penalty gradient on this panel
    for kind in ("GE1", "GE2"):
        for mode in ("prior", "penalty"):
            spec = corr.CorrectionSpec(kind=kind, mode=mode, trim_lag=1)
            cv = corr.log_correction(spec, data, family, state)
            scale = max(1.0, abs(cv.value))
            hh = 1e-5
            for idx in range(4):
                ap, am = state.alpha.copy(), state.alpha.copy()
                ap[idx] += hh
                am[idx] -= hh
                fd = (corr.log_correction(spec, data, family,
                                          dreplace(state, alpha=ap),
                                          want_grad=False).value
                      - corr.log_correction(spec, data, family,
                                            dreplace(state, alpha=am),
                                            want_grad=False).value) / (2 * hh)
                worst = max(worst, abs(cv.grad_alpha[idx] - fd) / scale)
    ok = worst < 1e-6
    _report("6b (gradient exactness)", ok, f"worst relative error {worst:.2e}")
    assert ok


def test_criterion_6c_ar_power_sums():
    worst = 0.0
    for mu in ([0.5], [0.2, 0.15], [0.3, 0.1, -0.05]):
        mu = np.asarray(mu, dtype=float)
        T = 11
        got = corr.ar_log_prior(mu, T)
        roots = np.roots(np.concatenate([[1.0], -mu]))
        want = sum((T - t) / t * np.real(np.sum(roots ** t)) for t in range(1, T))
        worst = max(worst, abs(got - want))
    ok = worst < 1e-8
    _report("6c (AR power sums vs roots)", ok, f"max difference {worst:.2e}")
    assert ok


def test_criterion_6d_ape_bias_dense_oracle(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 3, 3, seed=31)
    state = lik.ParamState(beta=np.array([0.8]), alpha=rng.normal(0, 0.3, 3),
                           gamma=rng.normal(0, 0.3, 3))
    eff = apem.EffectSpec(regressor="x1")
    got = apem.ape_bias_term(data, family, state, eff)
    _, _, d2 = apem.delta_profile(data, family, state, eff)
    M = np.zeros((6, 6))
    for i in range(3):
        M[i, i] = d2[i].sum() / 9
        for t in range(3):
            M[i, 3 + t] = M[3 + t, i] = d2[i, t] / 9
    for t in range(3):
        M[3 + t, 3 + t] = d2[:, t].sum() / 9
    eta = lik.build_index(data, family, state)
    eb = fam.expected_cells(family, eta, np.zeros(0))
    D = np.diag(np.concatenate([eb.e2.sum(axis=1), eb.e2.sum(axis=0)]))
    want = -0.5 * np.trace(M @ np.linalg.inv(D))
    ok = abs(got - want) < 1e-8
    _report("6d (APE bias dense trace)", ok, f"difference {abs(got - want):.2e}")
    assert ok


def test_criterion_6e_mle_brute_force():
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 3, 3, seed=36)
    res = est.fit_mle(data, family, drop=False)
    y, x = data.outcomes, data.regressors[:, :, 0]

    def neg_obj(theta):
        beta, alpha, gamma = theta[0], theta[1:4], theta[4:7]
        eta = beta * x + alpha[:, None] + gamma[None, :]
        return -((y * eta - np.logaddexp(0.0, eta)).sum()
                 - 0.5 * (alpha.sum() - gamma.sum()) ** 2)

    best = min((np.concatenate([[b], np.zeros(6)]) for b in
                np.arange(-3, 3.001, 0.05)), key=lambda th: neg_obj(th))
    out = optimize.minimize(neg_obj, best, method="Nelder-Mead",
                            options={"maxiter": 40000, "maxfev": 40000,
                                     "xatol": 1e-9, "fatol": 1e-13})
    diff = abs(res.beta_hat[0] - out.x[0])
    ok = diff < 1e-5
    _report("6e (MLE vs brute force)", ok, f"|difference| {diff:.2e}")
    assert ok


def test_criterion_6f_toy_posterior_ks():
    y = np.array([[1, 0, 1], [0, 1, 1]])
    x = np.array([[0.3, -0.8, 1.2], [0.9, -0.2, -1.1]])

    def logpost(th):
        eta = th[0] * x + np.array([[0.0], [th[1]]])
        return float((y * eta - np.logaddexp(0.0, eta)).sum())

    cfg = mcmc.ChainConfig(iterations=200_000, burn_in=20_000, thinning=5,
                           pilot_iterations=4_000, seed=42, block_sizes=(1, 2))
    out = mcmc.run_chain(target=logpost, dim=2, config=cfg)
    bdraws = np.sort(np.asarray(out.draws)[:, 0])
    bg = np.linspace(-6, 6, 400)
    ag = np.linspace(-8, 8, 401)
    logp = np.empty((400, 401))
    for i, b in enumerate(bg):
        eta = b * x[None, :, :] + np.concatenate(
            [np.zeros((401, 1, 1)), ag[:, None, None] * np.ones((1, 1, 1))],
            axis=1)
        logp[i] = (y * eta - np.logaddexp(0.0, eta)).sum(axis=(1, 2))
    w = np.exp(logp - logp.max())
    cdf = np.cumsum(w.sum(axis=1))
    cdf /= cdf[-1]
    ks = np.abs(np.searchsorted(bdraws, bg, side="right") / bdraws.size
                - cdf).max()
    ok = ks < 0.05
    _report("6f (toy posterior KS)", ok, f"KS distance {ks:.3f}")
    assert ok


def test_criterion_7_geweke_null_calibration():
    below = 0
    for seed in range(50):
        series = np.random.default_rng(1000 + seed).normal(0, 1, 2_000)
        if mcmc.geweke(series)["average_p"] < 0.05:
            below += 1
    frac = below / 50
    ok = frac <= 0.12
    _report("7 (geweke null calibration)", ok,
            f"fraction of average-p below 0.05: {frac:.2f}")
    assert ok


def test_criterion_8_determinism(tmp_path):
    from twfepanel.panel import write_panel_csv
    dgp = mc.DgpSpec(family="logit", n_units=12, n_periods=6, base_seed=9)
    data, _, _ = mc.gen_panel(dgp, 0)
    csv_path = tmp_path / "panel.csv"
    write_panel_csv(csv_path, data)
    est_out = tmp_path / "est"
    est_argv = ["estimate", "--data", str(csv_path), "--family", "logit",
                "--correction", "SE", "--mode", "penalty", "--seed", "11",
                "--out", str(est_out)]
    assert cli.main(est_argv) == 0
    first = {p.name: p.read_bytes() for p in est_out.iterdir()}
    assert cli.main(est_argv) == 0
    second = {p.name: p.read_bytes() for p in est_out.iterdir()}
    sim_out = tmp_path / "sim"
    sim_argv = ["simulate", "--preset", "table3-static-logit", "--reps", "2",
                "--T", "6", "--estimators", "uncorrected", "--seed", "3",
                "--iters", "300", "--burnin", "100", "--thin", "2",
                "--pilot", "100", "--out", str(sim_out)]
    assert cli.main(sim_argv) == 0
    sim_first = {p.name: p.read_bytes() for p in sim_out.iterdir()}
    assert cli.main(sim_argv) == 0
    sim_second = {p.name: p.read_bytes() for p in sim_out.iterdir()}
    ok = first == second and sim_first == sim_second
    _report("8 (seeded reruns byte-identical)", ok,
            f"estimate files {sorted(first)}, simulate files {sorted(sim_first)}")
    assert ok
