"""Upsilon fields, priors/penalties, their gradients, and the add-on shift."""

from dataclasses import replace

import numpy as np
import pytest

from twfepanel import corrections as corr
from twfepanel import errors
from twfepanel import estimation as est
from twfepanel import families as fam
from twfepanel import likelihood as lik

from conftest import random_mnl_panel, random_panel


def _state_for(data, family, rng, scale=0.4):
    K = data.n_regressors
    beta = lik.default_start_beta(family, data)
    beta[:K] = rng.normal(0, scale, K)
    d = family.index_dim
    shape_a = (data.n_units,) if d == 1 else (data.n_units, d)
    shape_g = (data.n_periods,) if d == 1 else (data.n_periods, d)
    return lik.ParamState(beta=beta, alpha=rng.normal(0, 0.3, shape_a),
                          gamma=rng.normal(0, 0.3, shape_g))


# ---------------------------------------------------------------------------
# Upsilon
# ---------------------------------------------------------------------------


def test_gaussian_ar_upsilon_pi_and_sigma_vanish(rng):
    m = 1
    y = rng.normal(0, 1, (5, 9)).cumsum(axis=1) * 0.1 + rng.normal(0, 1, (5, 9))
    data = est.make_ar_panel(y, m)
    family = fam.ModelFamily(kind="gaussian-ar", n_lags=m)
    state = lik.ParamState(beta=np.array([0.4, 0.9]),
                           alpha=rng.normal(0, 0.2, 5),
                           gamma=rng.normal(0, 0.2, data.n_periods))
    ups = corr.upsilon(data, family, state, L=2, expectation="analytical",
                       ref_state=state)
    assert np.abs(ups.upsilon_pi).max() < 1e-12
    # sigma is the last beta slot
    assert np.abs(ups.upsilon_beta[:, :, -1]).max() < 1e-12


def test_logit_strict_analytical_collapses_to_curvature_ratios(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 4, 4, seed=3)
    state = _state_for(data, family, rng)
    ups = corr.upsilon(data, family, state, L=1, expectation="analytical",
                       ref_state=state)
    eta = lik.build_index(data, family, state)
    eb = fam.expected_cells(family, eta, np.zeros(0))
    # E[d2 d1] = 0 for the canonical family at its own measure
    assert np.abs(eb.e2s).max() < 1e-14
    Dr = eb.e2.sum(axis=1)
    Dc = eb.e2.sum(axis=0)
    want = eb.e3 / Dr[:, None] + eb.e3 / Dc[None, :]
    assert np.abs(ups.upsilon_pi - want).max() < 1e-12


def test_poisson_predetermined_upsilon_matches_loop_oracle(rng):
    family = fam.ModelFamily(kind="poisson")
    data = random_panel(family, 3, 3, seed=9, dynamic=True)
    state = _state_for(data, family, rng)
    L = 1
    got = corr.upsilon(data, family, state, L=L, expectation="mixed")
    # independent transcription with explicit loops
    N, T, K = 3, 3, data.n_regressors
    eta = lik.build_index(data, family, state)
    om = np.exp(eta)
    y = data.outcomes
    s = y - om
    x = data.regressors
    ups_pi = np.zeros((N, T))
    ups_b = np.zeros((N, T, K))
    for i in range(N):
        for t in range(T):
            Dr = sum(-om[i, tau] for tau in range(T))
            Dc = sum(-om[j, t] for j in range(N))
            num = -om[i, t]  # E d3 + E[d2 d1] = -omega + 0
            cross = 0.0
            crossb = np.zeros(K)
            for tau in range(1, min(L, T - 1 - t) + 1):
                lam = T / (T - tau)
                cross += lam * (-om[i, t + tau]) * s[i, t]
                crossb += lam * (-om[i, t + tau]) * x[i, t + tau] * s[i, t]
            ups_pi[i, t] = num / Dr + num / Dc + cross / Dr
            ups_b[i, t] = (num * x[i, t]) / Dr + (num * x[i, t]) / Dc + crossb / Dr
    assert np.abs(got.upsilon_pi - ups_pi).max() < 1e-12
    assert np.abs(got.upsilon_beta - ups_b).max() < 1e-12


def test_mnl_upsilon_j2_matches_binary_logit(rng):
    datam = random_mnl_panel(4, 4, seed=6, J=2)
    fm = fam.ModelFamily(kind="multinomial-logit", n_categories=2)
    fl = fam.ModelFamily(kind="logit")
    datal = replace(datam, outcomes=datam.outcomes - 1)
    beta = rng.normal(0, 0.4, 1)
    al = rng.normal(0, 0.3, 4)
    ga = rng.normal(0, 0.3, 4)
    sm = lik.ParamState(beta=beta, alpha=al[:, None], gamma=ga[:, None])
    sl = lik.ParamState(beta=beta, alpha=al, gamma=ga)
    um = corr.upsilon(datam, fm, sm, L=1, expectation="mixed")
    ul = corr.upsilon(datal, fl, sl, L=1, expectation="mixed")
    assert np.abs(um.upsilon_pi[..., 0] - ul.upsilon_pi).max() < 1e-12
    assert np.abs(um.upsilon_beta - ul.upsilon_beta).max() < 1e-12


def test_upsilon_contract_errors(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 3, 3, seed=1)
    state = _state_for(data, family, rng)
    with pytest.raises(errors.ContractError):
        corr.upsilon(data, family, state, L=3)


# ---------------------------------------------------------------------------
# AR(m) prior
# ---------------------------------------------------------------------------


def test_ar1_zero_coefficient():
    assert corr.ar_log_prior(np.zeros(1), 7) == 0.0
    psi = corr.ar_psi_weights(np.zeros(1), 7)
    grad = sum((7 - 1 - h) * psi[h] for h in range(0, 6))
    assert grad == 6  # T - 1


def test_ar1_half_T3():
    assert corr.ar_log_prior(np.array([0.5]), 3) == pytest.approx(1.125, abs=1e-14)


@pytest.mark.parametrize("m,mu", [
    (1, [0.5]),
    (2, [0.2, 0.15]),  # roots 0.5, -0.3
    (3, [0.3, 0.1, -0.05]),
])
def test_power_sums_match_root_finding(m, mu):
    mu = np.asarray(mu, dtype=float)
    T = 9
    got = corr.ar_log_prior(mu, T)
    roots = np.roots(np.concatenate([[1.0], -mu]))  # lambda^m - mu1 lambda^{m-1} - ...
    want = 0.0
    for t in range(1, T):
        want += (T - t) / t * np.real(np.sum(roots ** t))
    assert got == pytest.approx(want, abs=1e-8)


def test_ar2_explicit_roots_case():
    # mu chosen so the roots are 0.5 and -0.3
    mu = np.array([0.2, 0.15])
    roots = np.sort(np.roots([1.0, -mu[0], -mu[1]]))
    assert np.allclose(np.sort(roots), [-0.3, 0.5])
    T = 12
    got = corr.ar_log_prior(mu, T)
    want = sum((T - t) / t * ((0.5) ** t + (-0.3) ** t) for t in range(1, T))
    assert got == pytest.approx(want, abs=1e-8)


def test_ar_unstable_flagged(rng):
    y = rng.normal(0, 1, (4, 8))
    data = est.make_ar_panel(y, 1)
    family = fam.ModelFamily(kind="gaussian-ar", n_lags=1)
    state = lik.ParamState(beta=np.array([1.01, 1.0]), alpha=np.zeros(4),
                           gamma=np.zeros(data.n_periods))
    cv = corr.log_correction(corr.CorrectionSpec(kind="ARm"), data, family, state)
    assert cv.diagnostics.get("ar_unstable")
    assert np.isfinite(cv.value)


# ---------------------------------------------------------------------------
# prior values and gradients
# ---------------------------------------------------------------------------


def test_se_value_matches_transcription(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 4, 4, seed=4)
    state = _state_for(data, family, rng)
    cv = corr.log_correction(corr.CorrectionSpec(kind="SE"), data, family, state)
    eta = lik.build_index(data, family, state)
    from scipy.special import expit
    F = expit(eta)
    w = F * (1 - F)
    want = np.log(w.sum(axis=1)).sum() + np.log(w.sum(axis=0)).sum()
    assert cv.value == pytest.approx(want, abs=1e-12)


CASES = [
    ("Flat", "logit", {}),
    ("SE", "logit", {}),
    ("SE", "poisson", {}),
    ("PE", "logit", {"dynamic": True}),
    ("PE", "poisson", {"dynamic": True}),
    ("GE1", "logit", {}),
    ("GE1", "probit", {}),
    ("GE1", "ordered-logit", {}),
    ("GE2", "logit", {}),
    ("GE2", "probit", {}),
    ("GE2", "ordered-logit", {}),
    ("SML", "multinomial-logit", {}),
    ("PML", "multinomial-logit", {"dynamic": True}),
]


@pytest.mark.parametrize("kind,fkind,opts", CASES,
                         ids=[f"{k}-{f}{'-dyn' if o else ''}" for k, f, o in CASES])
@pytest.mark.parametrize("mode", ["prior", "penalty"])
def test_gradients_match_finite_differences(kind, fkind, opts, mode, rng):
    if fkind == "ordered-logit":
        family = fam.ModelFamily(kind=fkind, n_categories=4, tau1=-1.0)
        data = random_panel(family, 4, 4, seed=8, beta=np.array([0.5, 0.3, 1.2]))
    elif fkind == "multinomial-logit":
        family = fam.ModelFamily(kind=fkind, n_categories=3)
        data = random_mnl_panel(4, 4, seed=8, dynamic=opts.get("dynamic", False))
    else:
        family = fam.ModelFamily(kind=fkind)
        data = random_panel(family, 4, 4, seed=8, **opts)
    state = _state_for(data, family, rng, scale=0.3)
    spec = corr.CorrectionSpec(kind=kind, mode=mode, trim_lag=1)
    cv = corr.log_correction(spec, data, family, state)
    h = 1e-5

    def val(st):
        return corr.log_correction(spec, data, family, st, want_grad=False).value

    scale = max(1.0, abs(cv.value))
    for j in range(state.beta.size):
        bp, bm = state.beta.copy(), state.beta.copy()
        bp[j] += h
        bm[j] -= h
        fd = (val(replace(state, beta=bp)) - val(replace(state, beta=bm))) / (2 * h)
        assert cv.grad_beta[j] == pytest.approx(fd, rel=1e-6, abs=1e-6 * scale)
    for idx in np.ndindex(state.alpha.shape):
        ap, am = state.alpha.copy(), state.alpha.copy()
        ap[idx] += h
        am[idx] -= h
        fd = (val(replace(state, alpha=ap)) - val(replace(state, alpha=am))) / (2 * h)
        assert cv.grad_alpha[idx] == pytest.approx(fd, rel=1e-6, abs=1e-6 * scale)
    for idx in np.ndindex(state.gamma.shape):
        gp, gm = state.gamma.copy(), state.gamma.copy()
        gp[idx] += h
        gm[idx] -= h
        fd = (val(replace(state, gamma=gp)) - val(replace(state, gamma=gm))) / (2 * h)
        assert cv.grad_gamma[idx] == pytest.approx(fd, rel=1e-6, abs=1e-6 * scale)


@pytest.mark.parametrize("kind,fkind", [
    ("SE", "logit"), ("GE1", "logit"), ("GE1", "probit"), ("GE2", "logit"),
    ("PE", "logit"),
])
def test_prior_penalty_gap_identity(kind, fkind, rng):
    family = fam.ModelFamily(kind=fkind)
    data = random_panel(family, 4, 5, seed=13)
    state = _state_for(data, family, rng)
    prior = corr.log_correction(corr.CorrectionSpec(kind=kind, mode="prior"),
                                data, family, state, want_grad=False)
    pen = corr.log_correction(corr.CorrectionSpec(kind=kind, mode="penalty"),
                              data, family, state, want_grad=False)
    eta = lik.build_index(data, family, state)
    eb = fam.expected_cells(family, eta, np.zeros(0))
    gap = 0.5 * (np.log((-eb.e2).sum(axis=1)).sum()
                 + np.log((-eb.e2).sum(axis=0)).sum())
    assert prior.value - pen.value == pytest.approx(gap, abs=1e-10)


def test_sml_with_two_categories_equals_se(rng):
    datam = random_mnl_panel(5, 4, seed=21, J=2)
    fm = fam.ModelFamily(kind="multinomial-logit", n_categories=2)
    fl = fam.ModelFamily(kind="logit")
    datal = replace(datam, outcomes=datam.outcomes - 1)
    beta = rng.normal(0, 0.5, 1)
    al = rng.normal(0, 0.3, 5)
    ga = rng.normal(0, 0.3, 4)
    sm = lik.ParamState(beta=beta, alpha=al[:, None], gamma=ga[:, None])
    sl = lik.ParamState(beta=beta, alpha=al, gamma=ga)
    vm = corr.log_correction(corr.CorrectionSpec(kind="SML"), datam, fm, sm,
                             want_grad=False)
    vl = corr.log_correction(corr.CorrectionSpec(kind="SE"), datal, fl, sl,
                             want_grad=False)
    assert vm.value == pytest.approx(vl.value, abs=1e-10)


def test_spec_validation_errors(rng):
    family = fam.ModelFamily(kind="probit")
    data = random_panel(family, 3, 3, seed=2)
    with pytest.raises(errors.ValidationError):
        corr.CorrectionSpec(kind="SE").validate_for(family, data)
    with pytest.raises(errors.ValidationError):
        corr.CorrectionSpec(kind="ARm").validate_for(fam.ModelFamily(kind="logit"),
                                                     random_panel(fam.ModelFamily(kind="logit"), 3, 3))
    dyn = random_panel(fam.ModelFamily(kind="logit"), 3, 3, seed=3, dynamic=True)
    with pytest.raises(errors.ValidationError):
        corr.CorrectionSpec(kind="SE").validate_for(fam.ModelFamily(kind="logit"), dyn)
    fmnl = fam.ModelFamily(kind="multinomial-logit", n_categories=3)
    with pytest.raises(errors.ValidationError):
        corr.CorrectionSpec(kind="GE1").validate_for(fmnl, random_mnl_panel(3, 3))


def test_spec_json_roundtrip():
    spec = corr.CorrectionSpec(kind="GE1", mode="prior", trim_lag=1,
                               expectation="mixed")
    text = spec.to_json()
    assert '"kind": "GE1"' in text
    assert corr.CorrectionSpec.from_json(text) == spec


# ---------------------------------------------------------------------------
# differential system
# ---------------------------------------------------------------------------


def test_differential_system_se_exact(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 4, 4, seed=17)
    state = _state_for(data, family, rng)
    rep = corr.verify_differential_system(corr.CorrectionSpec(kind="SE"),
                                          data, family, state)
    assert rep["max_alpha"] < 1e-8
    assert rep["max_gamma"] < 1e-8
    assert rep["max_beta"] < 1e-8


def test_differential_system_ge1(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 4, 4, seed=17)
    state = _state_for(data, family, rng)
    rep = corr.verify_differential_system(corr.CorrectionSpec(kind="GE1", trim_lag=1),
                                          data, family, state)
    assert rep["max_alpha"] < 1e-6
    assert rep["max_gamma"] < 1e-6


def test_differential_system_flat_gap_is_upsilon(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 4, 4, seed=19)
    state = _state_for(data, family, rng)
    rep = corr.verify_differential_system(corr.CorrectionSpec(kind="Flat"),
                                          data, family, state)
    ups = corr.upsilon(data, family, state, L=1, expectation="analytical",
                       ref_state=state)
    assert rep["max_alpha"] == pytest.approx(np.abs(ups.alpha_sums()).max(), abs=1e-9)
    assert rep["max_alpha"] > 1e-3  # nondegenerate panel


@pytest.mark.parametrize("omega", [0.0, 0.3, 1.0])
def test_affine_combination_preserves_differential_system(omega, rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 4, 4, seed=23)
    state = _state_for(data, family, rng)
    s1 = corr.CorrectionSpec(kind="GE1", trim_lag=1, expectation="analytical")
    s2 = corr.CorrectionSpec(kind="GE2", trim_lag=1, expectation="analytical")

    def value_fn(st):
        v1 = corr.log_correction(s1, data, family, st, want_grad=False,
                                 ref_state=state).value
        v2 = corr.log_correction(s2, data, family, st, want_grad=False,
                                 ref_state=state).value
        return omega * v1 + (1 - omega) * v2

    rep = corr.verify_differential_system(
        corr.CorrectionSpec(kind="GE1", trim_lag=1), data, family, state,
        value_fn=value_fn,
    )
    assert rep["max_alpha"] < 1e-6
    assert rep["max_gamma"] < 1e-6


# ---------------------------------------------------------------------------
# add-on correction
# ---------------------------------------------------------------------------


def test_addon_zero_under_analytical_strict(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 4, 4, seed=29)
    state = _state_for(data, family, rng)
    B_beta, B_pi = corr.addon_cross_terms(data, family, state,
                                          expectation="analytical")
    assert np.abs(B_beta).max() < 1e-14
    assert np.abs(B_pi).max() < 1e-14


def test_addon_shift_matches_dense_transcription(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 3, 4, seed=3, dynamic=True)
    res = est.fit_mle(data, family, drop=False)
    state = res.state
    new_state, info = est.apply_addon_correction(data, family, state, L=1)
    # oracle: dense reconstruction of the shift formulas
    N, T = 3, 4
    eta = lik.build_index(data, family, state)
    from scipy.special import expit
    F = expit(eta)
    w = F * (1 - F)
    s = data.outcomes - F
    x = data.regressors
    B_beta = np.zeros((N, 1))
    B_pi = np.zeros(N)
    for i in range(N):
        den = -w[i].sum()
        acc_b, acc_p = 0.0, 0.0
        for t in range(T - 1):
            lam = T / (T - 1)
            acc_b += lam * (-w[i, t + 1]) * x[i, t + 1, 0] * s[i, t]
            acc_p += lam * (-w[i, t + 1]) * s[i, t]
        B_beta[i, 0] = acc_b / den
        B_pi[i] = acc_p / den
    assert np.abs(info["B_beta"] - B_beta).max() < 1e-12
    assert np.abs(info["B_pi"] - B_pi).max() < 1e-12
    jd = lik.joint_derivatives(data, family, state)
    Hd = jd.H.dense()
    A_bphi = np.hstack([jd.A_ba, jd.A_bg]) / jd.scale
    W = -(jd.A_bb / jd.scale) - A_bphi @ np.linalg.solve(Hd, A_bphi.T)
    Bpad = np.concatenate([B_pi, np.zeros(T)])
    shift_beta = -np.linalg.solve(
        W, B_beta.sum(axis=0) + A_bphi @ np.linalg.solve(Hd, Bpad)
    )
    assert np.abs(info["beta_shift"] - shift_beta).max() < 1e-10
    phi_shift = -np.linalg.solve(Hd, Bpad)
    assert np.abs(info["phi_shift"] - phi_shift).max() < 1e-10


def test_upsilon_degenerate_denominator_names_unit(rng):
    family = fam.ModelFamily(kind="logit")
    data = random_panel(family, 3, 3, seed=1)
    state = lik.ParamState(beta=np.zeros(1),
                           alpha=np.array([45.0, 0.0, 0.0]),
                           gamma=np.zeros(3))
    with pytest.raises(errors.DegeneratePanelError) as err:
        corr.upsilon(data, family, state, L=1)
    assert err.value.unit == data.unit_ids[0]
