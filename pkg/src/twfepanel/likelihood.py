"""Joint two-way log-likelihood: assembly, derivatives, and concentration."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from . import families as fam
from .errors import ContractError, DegeneratePanelError, LinearAlgebraError

NORMALIZATIONS = ("penalty", "pin-first-alpha")

# beyond this magnitude an additive effect saturates every probability it
# touches at double precision; unidentified (separated) effects park here
_EFFECT_CAP = 35.0


@dataclass(frozen=True)
class ParamState:
    """Common parameters plus the two blocks of fixed effects.

    ``alpha``/``gamma`` are (N,) and (T,) for scalar-index families and
    (N, J-1), (T, J-1) for the multinomial family.  Under ``penalty`` the
    direction sum(alpha) - sum(gamma) is softly pinned with weight ``b``;
    under ``pin-first-alpha`` the first unit's effects are exactly zero.
    """

    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    normalization: str = "penalty"
    b: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        if self.normalization not in NORMALIZATIONS:
            raise ContractError(f"unknown normalization {self.normalization!r}")
        if self.normalization == "penalty" and not self.b > 0:
            raise ContractError("penalty normalization needs b > 0")
        if self.normalization == "pin-first-alpha" and not np.all(self.alpha[0] == 0.0):
            raise ContractError("pin-first-alpha requires alpha[0] == 0")

    @property
    def index_dim(self):
        return 1 if self.alpha.ndim == 1 else self.alpha.shape[1]


def zero_state(family, data, normalization="penalty", b=1.0, beta=None):
    """A fresh ParamState with zero effects and (optionally) given beta."""
    d = family.index_dim
    N, T = data.n_units, data.n_periods
    shape_a = (N,) if d == 1 else (N, d)
    shape_g = (T,) if d == 1 else (T, d)
    if beta is None:
        beta = default_start_beta(family, data)
    return ParamState(beta=np.asarray(beta, dtype=float),
                      alpha=np.zeros(shape_a), gamma=np.zeros(shape_g),
                      normalization=normalization, b=b)


def default_start_beta(family, data):
    """Zero slopes plus feasible ancillary starting values."""
    K = data.n_regressors
    beta = np.zeros(family.beta_dim(K))
    if family.kind == "ordered-logit":
        # cutoffs from marginal cumulative frequencies, kept increasing
        y = data.outcomes
        J = family.n_categories
        cum = np.cumsum([np.mean(y == k) for k in range(1, J)])
        cum = np.clip(cum, 1e-3, 1 - 1e-3)
        taus = np.log(cum / (1 - cum))
        taus = family.tau1 + np.maximum.accumulate(taus - taus[0] + 0.1) + 0.1
        beta[K:] = taus[1:]
    elif family.kind == "gaussian-ar":
        beta[K] = max(np.std(data.outcomes), 0.1)
    return beta


@dataclass(frozen=True)
class ParamLayout:
    """Packing order of the free parameter vector theta.

    theta = (beta, alpha[1:] or alpha, gamma), effects unit-major for
    vector-index families.
    """

    family: fam.ModelFamily
    n_units: int
    n_periods: int
    n_regressors: int
    normalization: str = "penalty"
    b: float = 1.0

    @property
    def index_dim(self):
        return self.family.index_dim

    @property
    def n_beta(self):
        return self.family.beta_dim(self.n_regressors)

    @property
    def n_alpha_free(self):
        n = self.n_units - (1 if self.normalization == "pin-first-alpha" else 0)
        return n * self.index_dim

    @property
    def n_gamma(self):
        return self.n_periods * self.index_dim

    @property
    def dim(self):
        return self.n_beta + self.n_alpha_free + self.n_gamma

    def pack(self, state):
        parts = [state.beta]
        a = state.alpha if self.normalization != "pin-first-alpha" else state.alpha[1:]
        parts += [np.ravel(a), np.ravel(state.gamma)]
        return np.concatenate(parts)

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ContractError(f"theta has length {theta.size}, expected {self.dim}")
        d = self.index_dim
        nb, na = self.n_beta, self.n_alpha_free
        beta = theta[:nb]
        a_free = theta[nb:nb + na]
        gamma = theta[nb + na:]
        if self.normalization == "pin-first-alpha":
            alpha = np.concatenate([np.zeros(d), a_free])
        else:
            alpha = a_free
        shape_a = (self.n_units,) if d == 1 else (self.n_units, d)
        shape_g = (self.n_periods,) if d == 1 else (self.n_periods, d)
        return ParamState(beta=beta, alpha=alpha.reshape(shape_a),
                          gamma=gamma.reshape(shape_g),
                          normalization=self.normalization, b=self.b)

    def labels(self, data):
        names = list(self.family.beta_labels(data.regressor_names))
        d = self.index_dim
        cats = [""] if d == 1 else [f":cat{k}" for k in range(2, d + 2)]
        start = 1 if self.normalization == "pin-first-alpha" else 0
        for u in data.unit_ids[start:]:
            names += [f"alpha[{u}]{c}" for c in cats]
        for p in data.period_ids:
            names += [f"gamma[{p}]{c}" for c in cats]
        return names


def layout_for(data, family, normalization="penalty", b=1.0):
    return ParamLayout(family, data.n_units, data.n_periods, data.n_regressors,
                       normalization, b)


def build_index(data, family, state):
    """Linear index eta per cell: x'beta_slopes + alpha_i + gamma_t."""
    x = data.regressors
    if family.kind == "multinomial-logit":
        slopes, _ = family.split_beta(state.beta, data.n_regressors)
        eta = np.einsum("ntk,ak->nta", x, slopes)
        return eta + state.alpha[:, None, :] + state.gamma[None, :, :]
    slopes, _ = family.split_beta(state.beta, data.n_regressors)
    return x @ slopes + state.alpha[:, None] + state.gamma[None, :]


def _anc(family, state, data):
    _, anc = family.split_beta(state.beta, data.n_regressors)
    return anc


def norm_scale(data):
    return 1.0 / np.sqrt(data.n_units * data.n_periods)


def penalty_value(state):
    """The -(b/2)(v'phi)^2 normalization term (per index component)."""
    if state.normalization != "penalty":
        return 0.0
    if state.alpha.ndim == 1:
        gap = state.alpha.sum() - state.gamma.sum()
        return -0.5 * state.b * gap ** 2
    gap = state.alpha.sum(axis=0) - state.gamma.sum(axis=0)
    return -0.5 * state.b * float(gap @ gap)


def raw_loglik(data, family, state):
    """Unnormalized sum of cell log likelihoods plus the normalization term."""
    eta = build_index(data, family, state)
    ll = fam.loglik_cells(family, data.outcomes, eta, _anc(family, state, data))
    return float(ll.sum()) + penalty_value(state)


def joint_loglik(data, family, state):
    """The (NT)^{-1/2}-scaled joint log likelihood of the spec."""
    return norm_scale(data) * raw_loglik(data, family, state)


@dataclass
class TwoWayHessian:
    """H = -d2L/dphi dphi' in raw (unscaled) units, stored structurally.

    ``r`` holds per-unit alpha blocks, ``c`` per-period gamma blocks, ``M``
    the unit x period coupling; ``b`` is the normalization-penalty weight
    (zero when pinned).  Vector-index families store d x d blocks.
    """

    r: np.ndarray          # (N,) or (N, d, d)
    c: np.ndarray          # (T,) or (T, d, d)
    M: np.ndarray          # (N, T) or (N, T, d, d)
    b: float = 0.0
    _chol = None

    @property
    def scalar(self):
        return self.r.ndim == 1

    @property
    def n_alpha(self):
        return self.r.shape[0] * (1 if self.scalar else self.r.shape[1])

    @property
    def n_gamma(self):
        return self.c.shape[0] * (1 if self.scalar else self.c.shape[1])

    def dense(self):
        if self.scalar:
            N, T = self.M.shape
            H = np.zeros((N + T, N + T))
            H[:N, :N] = np.diag(self.r) + self.b
            H[N:, N:] = np.diag(self.c) + self.b
            H[:N, N:] = self.M - self.b
            H[N:, :N] = (self.M - self.b).T
            return H
        N, d = self.r.shape[0], self.r.shape[1]
        T = self.c.shape[0]
        na, ng = N * d, T * d
        H = np.zeros((na + ng, na + ng))
        eye = np.eye(d)
        for i in range(N):
            H[i * d:(i + 1) * d, i * d:(i + 1) * d] = self.r[i]
        for t in range(T):
            H[na + t * d:na + (t + 1) * d, na + t * d:na + (t + 1) * d] = self.c[t]
        Mfull = self.M - self.b * eye
        H[:na, na:] = Mfull.transpose(0, 2, 1, 3).reshape(na, ng)
        H[na:, :na] = H[:na, na:].T
        # penalty couples alpha-alpha and gamma-gamma across units/periods
        if self.b:
            H[:na, :na] += self.b * np.tile(eye, (N, N))
            H[na:, na:] += self.b * np.tile(eye, (T, T))
        return H

    def solve(self, v):
        """Solve H x = v for stacked (alpha, gamma) right-hand sides."""
        H = self.dense()
        try:
            if self._chol is None:
                self._chol = linalg.cho_factor(H)
            return linalg.cho_solve(self._chol, v)
        except linalg.LinAlgError:
            # near-separated panels push curvature to zero; one ridge retry
            ridge = 1e-10 * max(np.abs(np.diag(H)).max(), 1.0)
            try:
                self._chol = linalg.cho_factor(H + ridge * np.eye(H.shape[0]))
                return linalg.cho_solve(self._chol, v)
            except linalg.LinAlgError as exc:
                cond = np.linalg.cond(H)
                raise LinearAlgebraError(
                    f"fixed-effect Hessian is not positive definite: {exc}",
                    cond=cond,
                ) from exc

    def logdet(self):
        H = self.dense()
        sign, val = np.linalg.slogdet(H)
        if sign <= 0:
            raise LinearAlgebraError("fixed-effect Hessian has non-positive determinant")
        return val


@dataclass
class JointDerivs:
    """Analytic derivatives of the scaled joint log likelihood.

    All arrays share the (NT)^{-1/2} normalization of ``joint_loglik``; the
    Hessian object ``H`` is kept in raw units with the scale recorded.
    """

    score_beta: np.ndarray
    score_alpha: np.ndarray
    score_gamma: np.ndarray
    A_bb: np.ndarray
    A_ba: np.ndarray
    A_bg: np.ndarray
    H: TwoWayHessian
    scale: float

    @property
    def score_phi(self):
        return np.concatenate([np.ravel(self.score_alpha), np.ravel(self.score_gamma)])

    def max_raw_score(self):
        return max(
            np.abs(self.score_beta).max() if self.score_beta.size else 0.0,
            np.abs(self.score_phi).max(),
        ) / self.scale


def joint_derivatives(data, family, state):
    """Scores and Hessian blocks of the scaled joint log likelihood."""
    eta = build_index(data, family, state)
    anc = _anc(family, state, data)
    x = data.regressors
    c = norm_scale(data)
    N, T, K = x.shape
    if family.kind == "multinomial-logit":
        return _joint_derivatives_mnl(data, family, state, eta, c)
    need_anc = family.n_ancillary > 0
    b = fam.deriv_cells(family, data.outcomes, eta, anc, need_anc=need_anc)
    d1, d2 = b.d1, b.d2
    # beta block: slopes then ancillary
    sb = np.einsum("nt,ntk->k", d1, x)
    A_bb = np.einsum("nt,ntk,ntl->kl", d2, x, x)
    A_ba_sl = np.einsum("nt,ntk->nk", d2, x).T          # (K, N)
    A_bg_sl = np.einsum("nt,ntk->tk", d2, x).T          # (K, T)
    if need_anc:
        sb = np.concatenate([sb, b.danc.sum(axis=(0, 1))])
        A = family.n_ancillary
        cross = np.einsum("nta,ntk->ka", b.danc1, x)    # slope x anc
        A_bb = np.block([
            [A_bb, cross],
            [cross.T, b.dancanc.sum(axis=(0, 1))],
        ])
        A_ba = np.vstack([A_ba_sl, b.danc1.sum(axis=1).T])
        A_bg = np.vstack([A_bg_sl, b.danc1.sum(axis=0).T])
    else:
        A_ba, A_bg = A_ba_sl, A_bg_sl
    s_alpha = d1.sum(axis=1)
    s_gamma = d1.sum(axis=0)
    pen_b = 0.0
    if state.normalization == "penalty":
        pen_b = state.b
        gap = state.alpha.sum() - state.gamma.sum()
        s_alpha = s_alpha - pen_b * gap
        s_gamma = s_gamma + pen_b * gap
    H = TwoWayHessian(r=-d2.sum(axis=1), c=-d2.sum(axis=0), M=-d2, b=pen_b)
    return JointDerivs(
        score_beta=c * sb, score_alpha=c * s_alpha, score_gamma=c * s_gamma,
        A_bb=c * A_bb, A_ba=c * A_ba, A_bg=c * A_bg, H=H, scale=c,
    )


def _joint_derivatives_mnl(data, family, state, eta, c):
    x = data.regressors
    N, T, K = x.shape
    d = family.index_dim
    b = fam.mnl_derivs(family, data.outcomes, eta, order=2)
    d1, d2 = b.d1, b.d2
    sb = np.einsum("nta,ntk->ak", d1, x).reshape(d * K)
    A_bb = np.einsum("ntab,ntk,ntl->akbl", d2, x, x).reshape(d * K, d * K)
    A_ba = np.einsum("ntab,ntk->aknb", d2, x).reshape(d * K, N * d)
    A_bg = np.einsum("ntab,ntk->aktb", d2, x).reshape(d * K, T * d)
    s_alpha = d1.sum(axis=1)
    s_gamma = d1.sum(axis=0)
    pen_b = 0.0
    if state.normalization == "penalty":
        pen_b = state.b
        gap = state.alpha.sum(axis=0) - state.gamma.sum(axis=0)
        s_alpha = s_alpha - pen_b * gap
        s_gamma = s_gamma + pen_b * gap
    H = TwoWayHessian(r=-d2.sum(axis=1), c=-d2.sum(axis=0), M=-d2, b=pen_b)
    return JointDerivs(
        score_beta=c * sb, score_alpha=c * s_alpha, score_gamma=c * s_gamma,
        A_bb=c * A_bb, A_ba=c * A_ba, A_bg=c * A_bg, H=H, scale=c,
    )


def concentrate_phi(data, family, state, tol=1e-10, max_sweeps=2000,
                    extra_grad=None, step_cap=4.0):
    """Maximize the joint log likelihood over the fixed effects at fixed beta.

    Alternating blockwise Newton sweeps: every alpha_i given gamma, then every
    gamma_t given alpha, each an O(NT) vectorized update.  ``extra_grad`` may
    supply the gradient of an additive correction term (its curvature is lower
    order, so likelihood curvature still drives the steps).

    The normalization penalty only pins the location direction: the data part
    is invariant to (alpha + c, gamma - c), so the sweeps run unpenalized and
    the exact penalty optimum is restored by recentering the gap
    sum(alpha) - sum(gamma) to zero.

    Returns the updated ParamState.
    """
    x = data.regressors
    anc = _anc(family, state, data)
    alpha = state.alpha.copy()
    gamma = state.gamma.copy()
    mnl = family.kind == "multinomial-logit"
    slopes, _ = family.split_beta(state.beta, data.n_regressors)
    if mnl:
        base = np.einsum("ntk,ak->nta", x, slopes)
    else:
        base = x @ slopes
    pinned = state.normalization == "pin-first-alpha"
    recenter = state.normalization == "penalty"
    N, T = data.n_units, data.n_periods

    def _recenter(a, g):
        if not recenter:
            return a, g
        gap = a.sum(axis=0) - g.sum(axis=0)
        c = gap / (N + T)
        return a - c, g + c

    for _ in range(max_sweeps):
        cur = replace(state, alpha=alpha, gamma=gamma)
        ga = gg = 0.0
        if extra_grad is not None:
            ga, gg = extra_grad(cur)
        if mnl:
            eye = np.eye(family.index_dim)
            eta = base + alpha[:, None, :] + gamma[None, :, :]
            db = fam.mnl_derivs(family, data.outcomes, eta, order=2)
            sa = db.d1.sum(axis=1) + ga
            ra = -db.d2.sum(axis=1)
            # ridge separation-collapsed blocks; their coordinates drift to
            # the effect cap and drop out of the identified problem
            ra = ra + eye * 1e-9 * np.maximum(
                np.trace(ra, axis1=1, axis2=2), 1.0
            )[:, None, None]
            step = np.linalg.solve(ra, sa[..., None])[..., 0]
            step = np.clip(step, -step_cap, step_cap)
            if pinned:
                step[0] = 0.0
            alpha = np.clip(alpha + step, -_EFFECT_CAP, _EFFECT_CAP)
            eta = base + alpha[:, None, :] + gamma[None, :, :]
            db = fam.mnl_derivs(family, data.outcomes, eta, order=2)
            sg = db.d1.sum(axis=0) + gg
            rc = -db.d2.sum(axis=0)
            rc = rc + eye * 1e-9 * np.maximum(
                np.trace(rc, axis1=1, axis2=2), 1.0
            )[:, None, None]
            gamma = gamma + np.clip(
                np.linalg.solve(rc, sg[..., None])[..., 0], -step_cap, step_cap
            )
            gamma = np.clip(gamma, -_EFFECT_CAP, _EFFECT_CAP)
            alpha, gamma = _recenter(alpha, gamma)
            eta = base + alpha[:, None, :] + gamma[None, :, :]
            db = fam.mnl_derivs(family, data.outcomes, eta, order=2)
        else:
            eta = base + alpha[:, None] + gamma[None, :]
            db = fam.deriv_cells(family, data.outcomes, eta, anc)
            sa = db.d1.sum(axis=1) + ga
            curv = np.maximum(-db.d2.sum(axis=1), 1e-9)
            step = np.clip(sa / curv, -step_cap, step_cap)
            if pinned:
                step[0] = 0.0
            alpha = np.clip(alpha + step, -_EFFECT_CAP, _EFFECT_CAP)
            eta = base + alpha[:, None] + gamma[None, :]
            db = fam.deriv_cells(family, data.outcomes, eta, anc)
            sg = db.d1.sum(axis=0) + gg
            curv = np.maximum(-db.d2.sum(axis=0), 1e-9)
            gamma = np.clip(gamma + np.clip(sg / curv, -step_cap, step_cap),
                            -_EFFECT_CAP, _EFFECT_CAP)
            alpha, gamma = _recenter(alpha, gamma)
            eta = base + alpha[:, None] + gamma[None, :]
            db = fam.deriv_cells(family, data.outcomes, eta, anc)
        cur = replace(state, alpha=alpha, gamma=gamma)
        if extra_grad is not None:
            ga, gg = extra_grad(cur)
        sa = db.d1.sum(axis=1) + ga
        sg = db.d1.sum(axis=0) + gg
        if pinned:
            sa = sa[1:]
        resid = max(np.abs(sa).max(initial=0.0), np.abs(sg).max(initial=0.0))
        if resid < tol:
            break
    return replace(state, alpha=alpha, gamma=gamma)
