"""Average partial effects, their variance-type bias term, and variances."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import special

from . import families as fam
from .errors import ContractError, DegeneratePanelError
from .likelihood import build_index

EFFECT_KINDS = ("continuous", "binary", "long-run")


@dataclass(frozen=True)
class EffectSpec:
    """A partial effect: which regressor, how it moves, which outcome."""

    regressor: str
    kind: str | None = None       # continuous derivative / binary difference
    category: int | None = None   # outcome category (ordered / multinomial)

    def label(self):
        parts = [self.regressor]
        if self.kind == "long-run":
            parts.append("longrun")
        if self.category is not None:
            parts.append(f"cat{self.category}")
        return ":".join(parts)


@dataclass
class ApeResult:
    """One average partial effect with its bias-corrected variant.

    ``corrected`` equals plug_in - bias_term for the plug-in estimator and
    posterior_mean - 2 * bias_term for the posterior-mean estimator.
    """

    label: str
    plug_in: float
    bias_term: float
    corrected: float
    variance: float
    kind: str = "plug-in"

    @property
    def se(self):
        return float(np.sqrt(max(self.variance, 0.0)))

    def to_dict(self):
        return {
            "label": self.label, "plug_in": self.plug_in,
            "bias_term": self.bias_term, "corrected": self.corrected,
            "variance": self.variance, "se": self.se, "kind": self.kind,
        }


def resolve_effect(data, family, effect):
    """Fill in the effect kind from regressor metadata when unspecified."""
    names = list(data.regressor_names)
    if effect.regressor not in names:
        raise ContractError(f"unknown effect regressor {effect.regressor!r}")
    k = names.index(effect.regressor)
    kind = effect.kind
    if kind is None:
        meta = data.regressor_meta[k]
        vals = np.unique(data.regressors[:, :, k])
        if meta.kind == "binary" or (
            meta.kind == "lagged-outcome" and np.isin(vals, (0, 1)).all()
        ):
            kind = "binary"
        else:
            kind = "continuous"
    if kind not in EFFECT_KINDS:
        raise ContractError(f"unknown effect kind {kind!r}")
    cat = effect.category
    if family.kind in ("ordered-logit", "multinomial-logit") and cat is None:
        raise ContractError("categorical families need an outcome category")
    return replace(effect, kind=kind), k


# ---------------------------------------------------------------------------
# outcome-function primitives g(.) with derivatives up to third order
# ---------------------------------------------------------------------------


def _logistic_chain(u):
    F = special.expit(u)
    f = F * (1 - F)
    return F, f, f * (1 - 2 * F), f * (1 - 6 * F + 6 * F ** 2)


def _normal_chain(u):
    Phi = special.ndtr(u)
    phi = np.exp(-0.5 * u ** 2) / np.sqrt(2 * np.pi)
    return Phi, phi, -u * phi, (u ** 2 - 1) * phi


def _outcome_chain(family, anc, u, category):
    """g(u), g'(u), g''(u), g'''(u) for the effect's outcome function."""
    kind = family.kind
    if kind == "logit":
        return _logistic_chain(u)
    if kind == "probit":
        return _normal_chain(u)
    if kind == "poisson":
        om = np.exp(u)
        return om, om, om, om
    if kind == "gaussian-ar":
        one = np.ones_like(u)
        return u, one, 0 * one, 0 * one
    if kind == "ordered-logit":
        cuts = family.cutoffs(anc)
        J = family.n_categories
        c = category
        if not 1 <= c <= J:
            raise ContractError(f"category {c} outside 1..{J}")
        hi = cuts[c - 1] - u if c <= J - 1 else None
        lo = cuts[c - 2] - u if c >= 2 else None
        Fb, fb, fpb, fppb = _logistic_chain(hi) if hi is not None else (1.0, 0.0, 0.0, 0.0)
        Fa, fa, fpa, fppa = _logistic_chain(lo) if lo is not None else (0.0, 0.0, 0.0, 0.0)
        P = Fb - Fa
        return P, fa - fb, fpb - fpa, fppa - fppb
    raise ContractError(f"no scalar outcome chain for family {kind}")


def _mnl_cat_derivs(p, category, order=3):
    """Derivatives of the category probability w.r.t. the index vector.

    Returns (q, D1, D2, D3) for one category; the base category (1) is the
    negated sum of the others.
    """
    d = p.shape[-1]
    if category == 1:
        q = 1.0 - p.sum(axis=-1)
        D1 = np.zeros_like(p)
        D2 = np.zeros(p.shape + (d,))
        D3 = np.zeros(p.shape + (d, d)) if order >= 3 else None
        for c in range(2, d + 2):
            qc, d1c, d2c, d3c = _mnl_cat_derivs(p, c, order)
            D1 -= d1c
            D2 -= d2c
            if order >= 3:
                D3 -= d3c
        return q, D1, D2, D3
    i = category - 2
    q = p[..., i]
    eye = np.eye(d)
    u = eye[i] - p                      # (..., a)
    D1 = q[..., None] * u
    pa = p[..., :, None]
    pb = p[..., None, :]
    core = u[..., :, None] * u[..., None, :] - pa * eye + pa * pb
    D2 = q[..., None, None] * core
    if order < 3:
        return q, D1, D2, None
    # third derivative: differentiate q * core(a,b) once more in V_e, with
    # du_a/dV_e = -p_a w_ae and dp_a/dV_e = p_a w_ae where w_xe = delta_xe - p_e
    w = eye - p[..., None, :]
    PA = p[..., :, None, None]
    PB = p[..., None, :, None]
    WAE = w[..., :, None, :]
    WBE = w[..., None, :, :]
    UA = u[..., :, None, None]
    UB = u[..., None, :, None]
    UE = u[..., None, None, :]
    EYE_AB = eye[:, :, None]
    D3 = q[..., None, None, None] * (
        UE * core[..., :, :, None]
        - PA * WAE * UB
        - UA * PB * WBE
        - PA * WAE * EYE_AB
        + PA * WAE * PB
        + PA * PB * WBE
    )
    return q, D1, D2, D3


# ---------------------------------------------------------------------------
# per-cell effect values and index derivatives
# ---------------------------------------------------------------------------


def delta_profile(data, family, state, effect, order=2):
    """Per-cell partial effects plus their first/second index derivatives.

    For scalar-index families returns (delta, d1, d2) arrays of shape (N,T);
    for multinomial, d1 is (N,T,d) and d2 is (N,T,d,d).
    """
    effect, k = resolve_effect(data, family, effect)
    eta = build_index(data, family, state)
    _, anc = family.split_beta(state.beta, data.n_regressors)
    x = data.regressors
    if family.kind == "multinomial-logit":
        return _delta_profile_mnl(data, family, state, effect, k, eta, order)
    slopes, _ = family.split_beta(state.beta, data.n_regressors)
    bk = slopes[k]
    if effect.kind == "continuous":
        _, g1, g2, g3 = _outcome_chain(family, anc, eta, effect.category)
        return bk * g1, bk * g2, bk * g3
    xk = x[:, :, k]
    eta1 = eta + (1.0 - xk) * bk
    eta0 = eta - xk * bk
    if effect.kind == "binary":
        g1v, g1d, g1dd, _ = _outcome_chain(family, anc, eta1, effect.category)
        g0v, g0d, g0dd, _ = _outcome_chain(family, anc, eta0, effect.category)
        return g1v - g0v, g1d - g0d, g1dd - g0dd
    if effect.kind == "long-run":
        if family.kind not in ("logit", "probit"):
            raise ContractError("long-run effects are defined for binary families")
        A, A1, A2, _ = _outcome_chain(family, anc, eta0, None)
        P11, f1, fp1, _ = _outcome_chain(family, anc, eta1, None)
        B = 1.0 - P11 + A
        B1 = A1 - f1
        B2 = A2 - fp1
        val = A / B
        d1 = A1 / B - A * B1 / B ** 2
        d2 = (A2 / B - 2 * A1 * B1 / B ** 2 - A * B2 / B ** 2
              + 2 * A * B1 ** 2 / B ** 3)
        return val, d1, d2
    raise ContractError(f"unhandled effect kind {effect.kind}")


def _delta_profile_mnl(data, family, state, effect, k, eta, order):
    slopes, _ = family.split_beta(state.beta, data.n_regressors)
    bcol = slopes[:, k]                      # per-category coefficients
    p = fam.mnl_probs(eta)
    if effect.kind == "continuous":
        q, D1, D2, D3 = _mnl_cat_derivs(p, effect.category, order=3)
        val = D1 @ bcol
        d1 = np.einsum("ntab,a->ntb", D2, bcol)
        d2 = np.einsum("ntabe,a->ntbe", D3, bcol)
        return val, d1, d2
    if effect.kind == "binary":
        xk = data.regressors[:, :, k]
        eta1 = eta + (1.0 - xk)[..., None] * bcol
        eta0 = eta - xk[..., None] * bcol
        p1, p0 = fam.mnl_probs(eta1), fam.mnl_probs(eta0)
        q1, D11, D21, _ = _mnl_cat_derivs(p1, effect.category, order=2)
        q0, D10, D20, _ = _mnl_cat_derivs(p0, effect.category, order=2)
        return q1 - q0, D11 - D10, D21 - D20
    raise ContractError(f"effect kind {effect.kind} undefined for multinomial")


# ---------------------------------------------------------------------------
# spec operations
# ---------------------------------------------------------------------------


def ape(data, family, state, effect, population_cells=None):
    """Population-scaled average partial effect at the given parameters.

    ``population_cells`` is the full-panel cell count when stayers were
    dropped upstream; dropped cells contribute zero effect.
    """
    val, _, _ = delta_profile(data, family, state, effect)
    pop = population_cells or val.size
    return float(val.sum() / pop)


def ape_bias_term(data, family, state, effect, population_cells=None):
    """The variance-driven bias of the APE estimator (trace formula)."""
    _, _, d2 = delta_profile(data, family, state, effect)
    pop = population_cells or (data.n_units * data.n_periods)
    eta = build_index(data, family, state)
    _, anc = family.split_beta(state.beta, data.n_regressors)
    if family.kind == "multinomial-logit":
        eb = fam.mnl_expected(family, eta)
        d = family.index_dim
        # ridge separation-adjacent blocks: a category a unit never reaches
        # has vanishing curvature and a vanishing effect curvature with it
        def _solve_tr(block, target):
            w = np.linalg.eigvalsh(-block)
            if w.min() < 1e-10:
                block = block - np.eye(d) * (1e-8 * max(-np.trace(block), 1e-10) / d)
            return float(np.trace(np.linalg.solve(block, target)))

        r = eb.e2.sum(axis=1)
        ct = eb.e2.sum(axis=0)
        term_u = sum(_solve_tr(r[i], d2[i].sum(axis=0) / pop)
                     for i in range(data.n_units))
        term_p = sum(_solve_tr(ct[t], d2[:, t].sum(axis=0) / pop)
                     for t in range(data.n_periods))
        return -0.5 * (term_u + term_p)
    eb = fam.expected_cells(family, eta, anc)
    r = eb.e2.sum(axis=1)
    ct = eb.e2.sum(axis=0)
    if np.any(r >= -1e-300) or np.any(ct >= -1e-300):
        raise DegeneratePanelError("zero curvature denominator in the APE bias term")
    term_u = float(((d2.sum(axis=1) / pop) / r).sum())
    term_p = float(((d2.sum(axis=0) / pop) / ct).sum())
    return -0.5 * (term_u + term_p)


def ape_gradient(data, family, state, effect, population_cells=None, h=1e-6):
    """Gradient of the APE w.r.t. (beta, alpha, gamma).

    The phi blocks are analytic (cell derivative sums); the beta block uses
    central differences of the scaled average, which is exact to O(h^2).
    """
    pop = population_cells or (data.n_units * data.n_periods)
    _, d1, _ = delta_profile(data, family, state, effect)
    if family.kind == "multinomial-logit":
        g_alpha = d1.sum(axis=1) / pop
        g_gamma = d1.sum(axis=0) / pop
    else:
        g_alpha = d1.sum(axis=1) / pop
        g_gamma = d1.sum(axis=0) / pop
    g_beta = np.zeros(state.beta.size)
    for j in range(state.beta.size):
        bp, bm = state.beta.copy(), state.beta.copy()
        bp[j] += h
        bm[j] -= h
        g_beta[j] = (
            ape(data, family, replace(state, beta=bp), effect, pop)
            - ape(data, family, replace(state, beta=bm), effect, pop)
        ) / (2 * h)
    return g_beta, g_alpha, g_gamma


def ape_variance(data, family, state, effect, av, population_cells=None):
    """Delta-method variance over (beta, phi) with the diagonal H structure.

    An approximation: the beta block uses W_raw^{-1}, the fixed-effect block
    the diagonal curvature inverses; cross terms are dropped.
    """
    g_beta, g_alpha, g_gamma = ape_gradient(data, family, state, effect,
                                            population_cells)
    var = float(g_beta @ np.linalg.solve(av["W_raw"], g_beta))
    var += float((np.ravel(g_alpha) ** 2 * np.ravel(av["se_alpha"]) ** 2).sum())
    var += float((np.ravel(g_gamma) ** 2 * np.ravel(av["se_gamma"]) ** 2).sum())
    return var


def ape_report(data, family, state, effects, av=None, population_cells=None,
               posterior=None):
    """ApeResult list for several effects at one parameter point.

    ``posterior`` optionally maps effect labels to (mean, variance) of the
    posterior draws of the effect, switching the estimator kind.
    """
    out = []
    for eff in effects:
        eff_r, _ = resolve_effect(data, family, eff)
        label = eff_r.label()
        plug = ape(data, family, state, eff_r, population_cells)
        bias = ape_bias_term(data, family, state, eff_r, population_cells)
        if posterior is not None and label in posterior:
            mean, var = posterior[label]
            out.append(ApeResult(label=label, plug_in=mean, bias_term=bias,
                                 corrected=mean - 2.0 * bias, variance=var,
                                 kind="posterior-mean"))
        else:
            var = (ape_variance(data, family, state, eff_r, av, population_cells)
                   if av is not None else np.nan)
            out.append(ApeResult(label=label, plug_in=plug, bias_term=bias,
                                 corrected=plug - bias, variance=var))
    return out


def default_effects(data, family, dynamic_lag=None):
    """The effects reported by default: every regressor, per target category."""
    cats = []
    if family.kind == "ordered-logit":
        cats = [2, family.n_categories]
    elif family.kind == "multinomial-logit":
        cats = list(range(2, family.n_categories + 1))
    effects = []
    for m in data.regressor_meta:
        if cats:
            effects += [EffectSpec(regressor=m.name, category=c) for c in cats]
        else:
            effects.append(EffectSpec(regressor=m.name))
    return effects
