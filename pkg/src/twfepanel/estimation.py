"""Maximum-likelihood and penalized estimation of two-way panels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import corrections as corr
from . import families as fam
from .errors import ContractError, LinearAlgebraError, ValidationError
from .likelihood import (concentrate_phi, default_start_beta, joint_derivatives,
                         norm_scale, raw_loglik, zero_state)
from .panel import PanelData, RegressorMeta, drop_stayers


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8            # on the scaled score, per the convergence contract
    max_iter: int = 200
    inner_tol_factor: float = 5e-3
    verbose: bool = False


@dataclass
class FitResult:
    beta_hat: np.ndarray
    state: object
    vcov_beta: np.ndarray | None
    converged: bool
    iterations: int
    gradient_norm: float
    dropped_units: tuple
    dropped_periods: tuple
    beta_labels: tuple
    method: str
    correction: corr.CorrectionSpec | None = None
    objective: float = np.nan
    full_shape: tuple | None = None
    panel: object = None          # the stayer-free panel the state lives on
    extras: dict = field(default_factory=dict)

    @property
    def phi_hat(self):
        return np.concatenate([np.ravel(self.state.alpha), np.ravel(self.state.gamma)])

    @property
    def se_beta(self):
        if self.vcov_beta is None:
            return None
        return np.sqrt(np.clip(np.diag(self.vcov_beta), 0.0, None))

    def to_json(self):
        payload = {
            "beta_hat": self.beta_hat.tolist(),
            "beta_labels": list(self.beta_labels),
            "se_beta": None if self.se_beta is None else self.se_beta.tolist(),
            "vcov_beta": None if self.vcov_beta is None else self.vcov_beta.tolist(),
            "alpha_hat": np.asarray(self.state.alpha).tolist(),
            "gamma_hat": np.asarray(self.state.gamma).tolist(),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gradient_norm": float(self.gradient_norm),
            "dropped_units": [str(u) for u in self.dropped_units],
            "dropped_periods": [str(p) for p in self.dropped_periods],
            "method": self.method,
            "correction": None if self.correction is None
            else json.loads(self.correction.to_json()),
            "objective": None if np.isnan(self.objective) else float(self.objective),
        }
        return json.dumps(payload, sort_keys=True)


def _total_objective(data, family, state, spec):
    val = raw_loglik(data, family, state)
    if spec is not None:
        val += corr.log_correction(spec, data, family, state, want_grad=False).value
    return val


def _correction_grad(data, family, state, spec):
    if spec is None:
        return None, None, None
    cv = corr.log_correction(spec, data, family, state, want_grad=True)
    return cv.grad_beta, cv.grad_alpha, cv.grad_gamma


def _maximize_joint(data, family, state, spec=None, options=FitOptions()):
    """Concentrated Newton: inner fixed-effect sweeps, outer beta steps.

    The inner solve uses the bordered-Hessian sweep structure (diagonal unit
    and period blocks plus the dense coupling handled cell-wise), so each
    sweep is O(NT) for scalar-index families.
    """
    NT = data.n_units * data.n_periods
    tol_raw = options.tol * np.sqrt(NT)
    inner_tol = max(tol_raw * options.inner_tol_factor, 1e-13)

    def extra(st):
        if spec is None:
            return None
        _, ga, gg = _correction_grad(data, family, st, spec)
        return ga, gg

    extra_fn = None if spec is None else extra
    state = concentrate_phi(data, family, state, tol=inner_tol, extra_grad=extra_fn)
    obj = _total_objective(data, family, state, spec)
    gnorm = np.inf
    it = 0
    for it in range(1, options.max_iter + 1):
        jd = joint_derivatives(data, family, state)
        c = jd.scale
        gb = jd.score_beta / c
        ga = np.ravel(jd.score_alpha) / c
        gg = np.ravel(jd.score_gamma) / c
        if spec is not None:
            cb, ca, cg = _correction_grad(data, family, state, spec)
            gb = gb + cb
            ga = ga + np.ravel(ca)
            gg = gg + np.ravel(cg)
        # effect coordinates whose curvature has collapsed are separated
        # (one-sided in some outcome); their scores cannot be driven to zero
        ga_m, gg_m, n_sep = _identified_scores(jd, ga, gg)
        gnorm = max(np.abs(gb).max(initial=0.0), ga_m, gg_m)
        if gnorm < tol_raw:
            return state, True, it, gnorm * c, obj, n_sep
        # concentrated beta step through the Schur complement of H
        try:
            A_bphi = np.hstack([jd.A_ba, jd.A_bg]) / c
            Hs = jd.H.solve(A_bphi.T)
            W_raw = -(jd.A_bb / c) - A_bphi @ Hs
            gphi = np.concatenate([ga, gg])
            g_conc = gb + A_bphi @ jd.H.solve(gphi)
            step = np.linalg.solve(W_raw, g_conc)
        except (LinearAlgebraError, np.linalg.LinAlgError):
            # separated or otherwise degenerate panel: report non-convergence
            break
        # line search: the step must not decrease the (penalized) objective.
        # Near the optimum the Newton gain drops below the inner-concentration
        # noise floor, so small-gradient steps are taken unguarded (the
        # objective is concave and locally quadratic there).
        pure_newton = gnorm < 1e4 * tol_raw
        scale = 1.0
        for _ in range(40):
            cand_beta = state.beta + scale * step
            try:
                cand = replace(state, beta=cand_beta)
                cand = concentrate_phi(data, family, cand, tol=inner_tol,
                                       extra_grad=extra_fn)
                cand_obj = _total_objective(data, family, cand, spec)
            except Exception:
                cand_obj = -np.inf
            if np.isfinite(cand_obj) and (pure_newton
                                          or cand_obj >= obj - 1e-12):
                break
            scale *= 0.5
        else:
            break
        state, obj = cand, cand_obj
    jd = joint_derivatives(data, family, state)
    _, _, n_sep = _identified_scores(jd, np.ravel(jd.score_alpha),
                                     np.ravel(jd.score_gamma))
    return state, gnorm < tol_raw, it, gnorm * norm_scale(data), obj, n_sep


def _identified_scores(jd, ga, gg):
    """Max absolute scores over effect coordinates with live curvature."""
    if jd.H.scalar:
        curv_a = np.asarray(jd.H.r, dtype=float)
        curv_g = np.asarray(jd.H.c, dtype=float)
    else:
        curv_a = np.diagonal(jd.H.r, axis1=1, axis2=2).ravel()
        curv_g = np.diagonal(jd.H.c, axis1=1, axis2=2).ravel()
    floor = 1e-6 * max(np.median(curv_a), np.median(curv_g), 1e-12)
    alive_a = curv_a >= floor
    alive_g = curv_g >= floor
    ga_m = np.abs(ga[alive_a]).max(initial=0.0)
    gg_m = np.abs(gg[alive_g]).max(initial=0.0)
    n_sep = int((~alive_a).sum() + (~alive_g).sum())
    return ga_m, gg_m, n_sep


def fit_mle(data, family, options=FitOptions(), start_beta=None, drop=True):
    """Uncorrected fixed-effects MLE on the identified (stayer-free) panel."""
    report = drop_stayers(data, family) if drop else None
    sub = report.panel if drop else data
    beta0 = default_start_beta(family, sub) if start_beta is None else start_beta
    state = zero_state(family, sub, beta=beta0)
    state, ok, it, gnorm, obj, n_sep = _maximize_joint(sub, family, state, None,
                                                       options)
    vcov = None
    try:
        vcov = asymptotic_variance(sub, family, state)["vcov_beta"]
    except LinearAlgebraError:
        ok = False
    return FitResult(
        beta_hat=state.beta.copy(), state=state, vcov_beta=vcov, converged=ok,
        iterations=it, gradient_norm=gnorm,
        dropped_units=report.dropped_units if drop else (),
        dropped_periods=report.dropped_periods if drop else (),
        beta_labels=tuple(family.beta_labels(sub.regressor_names)),
        method="mle", objective=obj, panel=sub,
        full_shape=report.full_shape if drop else (data.n_units, data.n_periods),
        extras={"separated_effects": n_sep},
    )


def fit_penalized(data, family, spec, options=FitOptions(), start=None, drop=True):
    """Maximum penalized likelihood under a penalty-mode correction."""
    if spec.mode != "penalty":
        raise ValidationError("fit_penalized requires a penalty-mode CorrectionSpec")
    report = drop_stayers(data, family) if drop else None
    sub = report.panel if drop else data
    spec.validate_for(family, sub)
    if start is None:
        start = fit_mle(sub, family, options, drop=False)
    state = start.state if isinstance(start, FitResult) else start
    state, ok, it, gnorm, obj, n_sep = _maximize_joint(sub, family, state, spec,
                                                       options)
    vcov = None
    try:
        vcov = asymptotic_variance(sub, family, state)["vcov_beta"]
    except LinearAlgebraError:
        ok = False
    return FitResult(
        beta_hat=state.beta.copy(), state=state, vcov_beta=vcov, converged=ok,
        iterations=it, gradient_norm=gnorm,
        dropped_units=report.dropped_units if drop else (),
        dropped_periods=report.dropped_periods if drop else (),
        beta_labels=tuple(family.beta_labels(sub.regressor_names)),
        method="penalized", correction=spec, objective=obj, panel=sub,
        full_shape=report.full_shape if drop else (data.n_units, data.n_periods),
        extras={"separated_effects": n_sep},
    )


def asymptotic_variance(data, family, state):
    """W-bar and the diagonal inverse structure of the fixed-effect Hessian.

    ``vcov_beta`` equals W_bar^{-1}/(NT); fixed-effect standard errors come
    from the diagonal curvature sums.
    """
    if state.normalization != "penalty":
        state = replace(state, normalization="penalty", b=1.0)
    jd = joint_derivatives(data, family, state)
    c = jd.scale
    NT = data.n_units * data.n_periods
    A_bphi = np.hstack([jd.A_ba, jd.A_bg]) / c
    try:
        Hs = jd.H.solve(A_bphi.T)
    except LinearAlgebraError:
        raise
    W_raw = -(jd.A_bb / c) - A_bphi @ Hs
    W_raw = 0.5 * (W_raw + W_raw.T)
    W_bar = W_raw / NT
    try:
        vcov = np.linalg.inv(W_raw)
    except np.linalg.LinAlgError as exc:
        raise LinearAlgebraError(
            f"singular information matrix: {exc}", cond=np.linalg.cond(W_raw)
        ) from exc
    vcov = 0.5 * (vcov + vcov.T)
    r = jd.H.r
    cblk = jd.H.c
    if jd.H.scalar:
        se_alpha = 1.0 / np.sqrt(np.maximum(r, 1e-300))
        se_gamma = 1.0 / np.sqrt(np.maximum(cblk, 1e-300))
    else:
        se_alpha = 1.0 / np.sqrt(np.maximum(np.diagonal(r, axis1=1, axis2=2), 1e-300))
        se_gamma = 1.0 / np.sqrt(np.maximum(np.diagonal(cblk, axis1=1, axis2=2), 1e-300))
    return {
        "W_bar": W_bar,
        "W_raw": W_raw,
        "vcov_beta": vcov,
        "se_alpha": se_alpha,
        "se_gamma": se_gamma,
        "H": jd.H,
        "A_bphi_raw": A_bphi,
    }


def apply_addon_correction(data, family, state, L=None, options=FitOptions()):
    """Shift (beta, phi) by the estimated cross-time bias blocks.

    Implements the quick add-on after a strict-exogeneity fit: the cross-time
    component of the leading bias is estimated at the current point and
    removed through the information matrix.
    """
    if state.normalization != "penalty":
        state = replace(state, normalization="penalty", b=1.0)
    B_beta, B_pi = corr.addon_cross_terms(data, family, state, L=L)
    av = asymptotic_variance(data, family, state)
    H = av["H"]
    A_bphi = av["A_bphi_raw"]
    B_pi_pad = np.concatenate([B_pi, np.zeros(data.n_periods)])
    HinvB = H.solve(B_pi_pad)
    rhs = B_beta.sum(axis=0)
    P = state.beta.size
    if rhs.size != P:
        rhs = np.concatenate([rhs, np.zeros(P - rhs.size)])
    # the strict-exogeneity prior misses exactly the cross-time component of
    # the bias gradient, so the estimated parameter bias (in raw units) is
    # -W^{-1}(sum_i B_i^beta + A H^{-1} B^pi) and -H^{-1} B^pi; remove both
    shift_beta = -np.linalg.solve(av["W_raw"], rhs + A_bphi @ HinvB)
    beta_new = state.beta - shift_beta
    # re-profile the effects at the shifted beta under the SE prior
    se_spec = corr.CorrectionSpec(kind="SE", mode="prior")

    def extra(st):
        cv = corr.log_correction(se_spec, data, family, st, want_grad=True,
                                 validate=False)
        return cv.grad_alpha, cv.grad_gamma

    prof = concentrate_phi(data, family, replace(state, beta=beta_new),
                           tol=1e-9, extra_grad=extra)
    phi_shift = -HinvB
    alpha_new = prof.alpha - phi_shift[:data.n_units]
    gamma_new = prof.gamma - phi_shift[data.n_units:]
    return replace(state, beta=beta_new, alpha=alpha_new, gamma=gamma_new), {
        "beta_shift": shift_beta, "phi_shift": phi_shift,
        "B_beta": B_beta, "B_pi": B_pi,
    }


# ---------------------------------------------------------------------------
# gaussian AR(m) within estimation
# ---------------------------------------------------------------------------


def make_ar_panel(outcomes, m):
    """PanelData for an AR(m) fit from a raw N x (T_pre + T) outcome matrix.

    The first m columns only seed the lags; the estimation window is the
    remaining T columns, each with its m lagged outcomes as regressors.
    """
    y = np.asarray(outcomes, dtype=float)
    if y.ndim != 2 or y.shape[1] <= m + 1:
        raise ContractError("need at least m+2 outcome columns for an AR(m) panel")
    yw = y[:, m:]
    lags = np.stack([y[:, m - j:-j] for j in range(1, m + 1)], axis=2)
    meta = tuple(
        RegressorMeta(name=f"lag{j}", exogeneity="predetermined", kind="lagged-outcome")
        for j in range(1, m + 1)
    )
    # lag columns are genuine shifted outcomes by construction
    return PanelData(outcomes=yw, regressors=lags, regressor_meta=meta)


def fit_ar_within(data, m=None, options=FitOptions(), penalized=True):
    """Two-way within AR(m) fit solving the penalized normal equations.

    ``data`` may be a PanelData built by :func:`make_ar_panel` or a raw
    outcome matrix.  With ``penalized=False`` this is the plain within OLS
    estimator (the Nickell-biased benchmark).
    """
    if isinstance(data, np.ndarray):
        if m is None:
            raise ContractError("m is required when passing a raw outcome matrix")
        data = make_ar_panel(data, m)
    if m is None:
        m = data.n_regressors
    family = fam.ModelFamily(kind="gaussian-ar", n_lags=m)
    N, T = data.n_units, data.n_periods
    y = data.outcomes.astype(float)
    X = data.regressors
    ydd = _double_demean(y)
    Xdd = np.stack([_double_demean(X[:, :, j]) for j in range(m)], axis=2)
    G = np.einsum("ntj,ntk->jk", Xdd, Xdd)
    try:
        Ginv = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise LinearAlgebraError(
            f"singular demeaned Gram matrix: {exc}", cond=np.linalg.cond(G)
        ) from exc
    b = np.einsum("ntj,nt->j", Xdd, ydd)
    mu = Ginv @ b
    sigma2 = max(np.mean((ydd - Xdd @ mu) ** 2), 1e-12)
    it = 0
    weight = N / T  # one Lancaster-type term per unit
    if penalized:
        for it in range(1, 500 + 1):
            grad = weight * corr.ar_prior_gradient(mu, T)
            mu_new = Ginv @ (b + sigma2 * grad)
            sigma2 = max(np.mean((ydd - Xdd @ mu_new) ** 2), 1e-12)
            if np.abs(mu_new - mu).max() < 1e-12:
                mu = mu_new
                break
            mu = mu_new
    resid = ydd - Xdd @ mu
    sigma2 = max(np.mean(resid ** 2), 1e-12)
    # normal-equation residual at the solution
    if penalized:
        grad = weight * corr.ar_prior_gradient(mu, T)
        eqn_resid = G @ mu - b - sigma2 * grad
    else:
        eqn_resid = G @ mu - b
    gnorm = float(np.abs(eqn_resid).max())
    beta = np.concatenate([mu, [np.sqrt(sigma2)]])
    # effects recovered from residual-level means (one location convention)
    levels = y - X @ mu
    grand = levels.mean()
    alpha = levels.mean(axis=1) - grand
    gamma = levels.mean(axis=0)
    state = replace(zero_state(family, data, beta=beta), alpha=alpha, gamma=gamma)
    vcov_mu = sigma2 * Ginv
    vcov = np.zeros((m + 1, m + 1))
    vcov[:m, :m] = vcov_mu
    vcov[m, m] = sigma2 / (2.0 * N * T)
    return FitResult(
        beta_hat=beta, state=state, vcov_beta=vcov,
        converged=gnorm < 1e-6 * max(1.0, np.abs(b).max()),
        iterations=it, gradient_norm=gnorm, dropped_units=(), dropped_periods=(),
        beta_labels=tuple(family.beta_labels(data.regressor_names)),
        method="ar-within-penalized" if penalized else "ar-within",
        correction=corr.CorrectionSpec(kind="ARm") if penalized else None,
        objective=np.nan, full_shape=(N, T), panel=data,
        extras={"sigma2": float(sigma2), "normal_eq_residual": eqn_resid.tolist()},
    )


def _double_demean(a):
    return a - a.mean(axis=1, keepdims=True) - a.mean(axis=0, keepdims=True) + a.mean()
