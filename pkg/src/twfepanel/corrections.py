"""Bias contributions and the bias-reducing priors / penalties.

Expectation handling
--------------------
``observed``   every expectation is replaced by the realized per-cell value
               or product.
``mixed``      curvature-type expectations (E[d2], E[d3] and their ancillary
               mixes) use model-implied closed forms; score products
               (E[d1^2], cross-time lead-lag products) stay observed.  This
               is the estimation default: the stochastic score-square terms
               are what make the generic priors integrate the bias
               contributions.
``analytical`` all expectations are model-implied with the outcome measure
               frozen at a reference point, and cross-time products
               factorized (exact under strict exogeneity).  Value-only;
               used by the differential-system verifier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import families as fam
from .errors import ContractError, DegeneratePanelError, ValidationError
from .likelihood import build_index

KINDS = ("Flat", "GE1", "GE2", "SE", "PE", "SML", "PML", "ARm")
MODES = ("prior", "penalty")
EXPECTATION_MODES = ("observed", "analytical", "mixed")

_FLOOR = 1e-10
_RIDGE = 1e-8


@dataclass(frozen=True)
class CorrectionSpec:
    """Which correction, in which mode, with which trimming and expectations."""

    kind: str
    mode: str = "prior"
    trim_lag: int | None = None
    expectation: str = "mixed"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown correction kind {self.kind!r}")
        if self.mode not in MODES:
            raise ValidationError(f"unknown correction mode {self.mode!r}")
        if self.expectation not in EXPECTATION_MODES:
            raise ValidationError(f"unknown expectation mode {self.expectation!r}")
        if self.trim_lag is not None and self.trim_lag < 0:
            raise ValidationError("trim lag must be nonnegative")

    def effective_lag(self, n_periods):
        L = self.trim_lag
        if L is None:
            L = 1 if n_periods < 30 else 2  # small-lag practice for short panels
        if L >= n_periods:
            raise ContractError(f"trim lag {L} must be smaller than T={n_periods}")
        return L

    def validate_for(self, family, data):
        kind = self.kind
        if kind in ("SE", "PE") and family.kind not in ("logit", "poisson"):
            raise ValidationError(
                f"correction {kind} applies to one-parameter exponential families "
                f"(logit, poisson), not {family.kind}"
            )
        if kind in ("SML", "PML") and family.kind != "multinomial-logit":
            raise ValidationError(f"correction {kind} applies to multinomial-logit only")
        if kind in ("SE", "SML") and not data.all_strict:
            raise ValidationError(
                f"correction {kind} requires all regressors strictly exogenous; "
                "use the predetermined variant or the add-on correction"
            )
        if kind == "ARm" and family.kind != "gaussian-ar":
            raise ValidationError("correction ARm applies to gaussian-ar panels only")
        if kind in ("GE1", "GE2") and family.index_dim != 1:
            raise ValidationError(
                "GE corrections are scalar-index; use SML/PML for multinomial panels"
            )

    def to_json(self):
        return json.dumps(
            {"kind": self.kind, "mode": self.mode, "L": self.trim_lag,
             "expectation": self.expectation},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text) if isinstance(text, str) else text
        return cls(kind=obj["kind"], mode=obj.get("mode", "prior"),
                   trim_lag=obj.get("L"), expectation=obj.get("expectation", "mixed"))


def default_correction(family, data, mode="prior"):
    """Recommended correction per family and regressor exogeneity."""
    strict = data.all_strict
    if family.kind in ("logit", "poisson"):
        kind = "SE" if strict else "PE"
    elif family.kind == "multinomial-logit":
        kind = "SML" if strict else "PML"
    elif family.kind == "gaussian-ar":
        kind = "ARm"
    else:
        kind = "GE1"
    return CorrectionSpec(kind=kind, mode=mode)


@dataclass
class CorrectionValue:
    value: float
    grad_beta: np.ndarray | None
    grad_alpha: np.ndarray | None
    grad_gamma: np.ndarray | None
    diagnostics: dict

    @property
    def grad_phi(self):
        return np.concatenate([np.ravel(self.grad_alpha), np.ravel(self.grad_gamma)])


@dataclass
class UpsilonField:
    """Observation-level contributions to the leading bias gradient."""

    upsilon_pi: np.ndarray     # (N,T) or (N,T,d)
    upsilon_beta: np.ndarray   # (N,T,P)

    def alpha_sums(self):
        return self.upsilon_pi.sum(axis=1)

    def gamma_sums(self):
        return self.upsilon_pi.sum(axis=0)

    def beta_sum(self):
        return self.upsilon_beta.sum(axis=(0, 1))


# ---------------------------------------------------------------------------
# shared ingredients (scalar-index families)
# ---------------------------------------------------------------------------


class _ScalarInputs:
    """Per-cell arrays every scalar-index correction is built from."""

    def __init__(self, spec, data, family, state, ref_state=None):
        self.data = data
        self.family = family
        self.x = data.regressors
        self.N, self.T = data.n_units, data.n_periods
        self.A = family.n_ancillary
        self.need_anc = self.A > 0
        need_anc = self.need_anc
        eta = build_index(data, family, state)
        _, anc = family.split_beta(state.beta, data.n_regressors)
        rb = fam.deriv_cells(family, data.outcomes, eta, anc, need_anc=need_anc)
        self.mode = spec.expectation
        at = None
        if ref_state is not None:
            eta_ref = build_index(data, family, ref_state)
            _, anc_ref = family.split_beta(ref_state.beta, data.n_regressors)
            at = (eta_ref, anc_ref)
        if self.mode == "observed":
            self.e2, self.de2, self.e3 = rb.d2, rb.d3, rb.d3
            self.ess, self.dess = rb.d1 ** 2, 2.0 * rb.d1 * rb.d2
            self.e2s = rb.d2 * rb.d1
            self.es1 = None
            if need_anc:
                self.de2_anc = rb.danc2
                self.dess_anc = 2.0 * rb.d1[..., None] * rb.danc1
                self.eanc2 = rb.danc2
                self.eanc1s = rb.danc1 * rb.d1[..., None]
        else:
            eb = fam.expected_cells(family, eta, anc, at=at, need_anc=need_anc)
            self.e2, self.de2, self.e3 = eb.e2, eb.de2, eb.e3
            if self.mode == "analytical":
                self.ess, self.dess, self.e2s = eb.ess, eb.dess, eb.e2s
                self.es1 = _expected_score(family, eta, anc, at)
            else:  # mixed: observed score products
                self.ess, self.dess = rb.d1 ** 2, 2.0 * rb.d1 * rb.d2
                self.e2s = eb.e2s
                self.es1 = None
            if need_anc:
                self.de2_anc = eb.de2_anc
                self.dess_anc = (
                    2.0 * rb.d1[..., None] * rb.danc1 if self.mode == "mixed"
                    else eb.dess_anc
                )
                self.eanc2, self.eanc1s = eb.eanc2, eb.eanc1s
        if not need_anc:
            self.de2_anc = self.dess_anc = self.eanc2 = self.eanc1s = None
        self.s = rb.d1
        self.ds = rb.d2
        self.dsa = rb.danc1 if need_anc else None
        # under strict exogeneity the lead-lag expectations are analytically
        # zero; only the pure sample-analog mode keeps the observed products
        self.cross_zero = data.all_strict and self.mode != "observed"


    def cross_cells(self, L):
        """Trimmed lead-lag score products and their per-cell derivatives.

        Returns (num_i, Gnum, Ganc): num_i sums lambda_tau s_{i,t+tau} s_{it};
        Gnum[i,u] = d num_i / d eta_{iu}.  Analytical mode factorizes the
        products through the mean score (value-only path).
        """
        N, T = self.N, self.T
        s = self.s if self.mode != "analytical" else self.es1
        num = np.zeros(N)
        G = np.zeros((N, T))
        Ganc = np.zeros((N, T, self.A)) if self.need_anc else None
        if self.cross_zero:
            return num, G, Ganc
        for tau in range(1, L + 1):
            lam = T / (T - tau)
            num += lam * (s[:, tau:] * s[:, :T - tau]).sum(axis=1)
            if self.mode == "analytical":
                continue  # gradients are not assembled in analytical mode
            pads = np.zeros((N, T))
            pads[:, :T - tau] += s[:, tau:]
            pads[:, tau:] += s[:, :T - tau]
            G += lam * self.ds * pads
            if self.need_anc:
                Ganc += lam * self.dsa * pads[..., None]
        return num, G, Ganc


def _expected_score(family, eta, anc, at):
    """E[d1] under the (possibly frozen) outcome measure."""
    if family.kind == "poisson":
        om_ref = np.exp(at[0]) if at is not None else np.exp(eta)
        return om_ref - np.exp(eta)
    if family.kind == "gaussian-ar":
        mu_ref = at[0] if at is not None else eta
        return (np.asarray(mu_ref) - eta) / float(anc[0]) ** 2
    out = np.zeros_like(np.asarray(eta, dtype=float))
    for k, pk in fam.outcome_support(family, eta, anc, at=at):
        b = fam.deriv_cells(family, np.full(np.shape(eta), k), eta, anc)
        out += pk * b.d1
    return out


class _GradAcc:
    """Accumulates per-cell derivative fields into (beta, alpha, gamma) grads."""

    def __init__(self, inputs):
        self.inp = inputs
        N, T = inputs.N, inputs.T
        self.cells = np.zeros((N, T))
        self.cells_anc = np.zeros((N, T, inputs.A)) if inputs.need_anc else None

    def add(self, cell_field, anc_field=None):
        self.cells += cell_field
        if anc_field is not None and self.cells_anc is not None:
            self.cells_anc += anc_field

    def finish(self):
        inp = self.inp
        ga = self.cells.sum(axis=1)
        gg = self.cells.sum(axis=0)
        gb = np.einsum("nt,ntk->k", self.cells, inp.x)
        if inp.need_anc:
            gb = np.concatenate([gb, self.cells_anc.sum(axis=(0, 1))])
        return gb, ga, gg


def _floored(values, diagnostics, label):
    floored = values < _FLOOR
    if floored.any():
        diagnostics[label] = diagnostics.get(label, 0) + int(floored.sum())
        values = np.where(floored, _FLOOR, values)
    return values, ~floored


# value pieces: each returns (value, cell_field, anc_field, ...) where the
# cell field is d value / d eta_it, so alpha/gamma/beta gradients assemble
# uniformly in _GradAcc.


def _piece_lnR(inp, diagnostics):
    """sum_i ln R_i with R_i = sum_t (-e2)."""
    R = (-inp.e2).sum(axis=1)
    R, alive = _floored(R, diagnostics, "floored_unit_curvature")
    val = float(np.log(R).sum())
    w = np.where(alive, 1.0 / R, 0.0)[:, None]
    cell = -inp.de2 * w
    anc = -inp.de2_anc * w[..., None] if inp.need_anc else None
    return val, cell, anc, R, alive


def _piece_lnC(inp, diagnostics):
    C = (-inp.e2).sum(axis=0)
    C, alive = _floored(C, diagnostics, "floored_period_curvature")
    val = float(np.log(C).sum())
    w = np.where(alive, 1.0 / C, 0.0)[None, :]
    cell = -inp.de2 * w
    anc = -inp.de2_anc * w[..., None] if inp.need_anc else None
    return val, cell, anc, C, alive


def _piece_ratio_unit(inp, R, alive):
    """sum_i U_i / R_i with U_i = sum_t ess."""
    U = inp.ess.sum(axis=1)
    val = float(np.where(alive, U / R, 0.0).sum())
    wr = np.where(alive, 1.0 / R, 0.0)[:, None]
    wu = np.where(alive, U / R ** 2, 0.0)[:, None]
    cell = inp.dess * wr + wu * inp.de2
    anc = None
    if inp.need_anc:
        anc = inp.dess_anc * wr[..., None] + wu[..., None] * inp.de2_anc
    return val, cell, anc


def _piece_ratio_period(inp, C, alive):
    V = inp.ess.sum(axis=0)
    val = float(np.where(alive, V / C, 0.0).sum())
    wr = np.where(alive, 1.0 / C, 0.0)[None, :]
    wu = np.where(alive, V / C ** 2, 0.0)[None, :]
    cell = inp.dess * wr + wu * inp.de2
    anc = None
    if inp.need_anc:
        anc = inp.dess_anc * wr[..., None] + wu[..., None] * inp.de2_anc
    return val, cell, anc


def _piece_spectral(inp, L, R, alive):
    """sum_i num_i / R_i, the trimmed cross-time term."""
    num, G, Ganc = inp.cross_cells(L)
    val = float(np.where(alive, num / R, 0.0).sum())
    wr = np.where(alive, 1.0 / R, 0.0)[:, None]
    wn = np.where(alive, num / R ** 2, 0.0)[:, None]
    cell = G * wr + wn * inp.de2
    anc = None
    if inp.need_anc:
        anc = Ganc * wr[..., None] + wn[..., None] * inp.de2_anc
    return val, cell, anc


def _piece_ln_period_score(inp, diagnostics):
    """-(1/2) sum_t ln V_t with V_t = sum_i ess."""
    V = inp.ess.sum(axis=0)
    V, alive = _floored(V, diagnostics, "floored_period_score")
    val = -0.5 * float(np.log(V).sum())
    w = np.where(alive, -0.5 / V, 0.0)[None, :]
    cell = inp.dess * w
    anc = inp.dess_anc * w[..., None] if inp.need_anc else None
    return val, cell, anc


def _piece_ln_unit_bracket(inp, L, diagnostics):
    """-(1/2) sum_i ln(U_i + 2 num_i), the GE-2 bracketed sum."""
    num, G, Ganc = inp.cross_cells(L)
    B = inp.ess.sum(axis=1) + 2.0 * num
    B, alive = _floored(B, diagnostics, "ridged_ge2_bracket")
    val = -0.5 * float(np.log(B).sum())
    w = np.where(alive, -0.5 / B, 0.0)[:, None]
    cell = (inp.dess + 2.0 * G) * w
    anc = None
    if inp.need_anc:
        anc = (inp.dess_anc + 2.0 * Ganc) * w[..., None]
    return val, cell, anc


# ---------------------------------------------------------------------------
# log_correction
# ---------------------------------------------------------------------------


def log_correction(spec, data, family, state, want_grad=True, ref_state=None,
                   validate=True):
    """Value and exact gradient of ln p (prior) or ln p^J (penalty).

    Gradients are in raw log-likelihood units: the correction adds once to
    the unscaled joint log likelihood.  ``validate=False`` skips the
    family/exogeneity compatibility check; the add-on workflow uses it to
    run the strict-exogeneity prior as its first stage on dynamic panels.
    """
    if validate:
        spec.validate_for(family, data)
    diagnostics = {}
    P = family.beta_dim(data.n_regressors)
    d = family.index_dim
    N, T = data.n_units, data.n_periods
    if spec.kind == "Flat":
        shape_a = (N,) if d == 1 else (N, d)
        shape_g = (T,) if d == 1 else (T, d)
        return CorrectionValue(0.0, np.zeros(P), np.zeros(shape_a), np.zeros(shape_g),
                               diagnostics)
    if spec.kind == "ARm":
        return _ar_correction(spec, data, family, state, diagnostics)
    if spec.kind in ("SML", "PML"):
        return _mnl_correction(spec, data, family, state, want_grad, diagnostics)
    if spec.expectation == "analytical" and want_grad:
        raise ContractError(
            "analytical expectation mode is value-only; use mixed or observed "
            "for gradient-based estimation"
        )
    L = spec.effective_lag(T)
    inp = _ScalarInputs(spec, data, family, state, ref_state=ref_state)
    acc = _GradAcc(inp)
    vlnR, cR, aR, R, aliveR = _piece_lnR(inp, diagnostics)
    vlnC, cC, aC, C, aliveC = _piece_lnC(inp, diagnostics)
    kind = spec.kind
    if kind == "SE":
        val = vlnR + vlnC
        acc.add(cR, aR)
        acc.add(cC, aC)
    elif kind == "PE":
        vS, cS, aS = _piece_spectral(inp, L, R, aliveR)
        val = vlnR + vlnC - vS
        acc.add(cR + cC - cS,
                None if not inp.need_anc else aR + aC - aS)
    elif kind == "GE1":
        vQ1, cQ1, aQ1 = _piece_ratio_unit(inp, R, aliveR)
        vQ2, cQ2, aQ2 = _piece_ratio_period(inp, C, aliveC)
        vS, cS, aS = _piece_spectral(inp, L, R, aliveR)
        val = 0.5 * (vlnR - vQ1) + 0.5 * (vlnC - vQ2) - vS
        acc.add(0.5 * (cR - cQ1) + 0.5 * (cC - cQ2) - cS,
                None if not inp.need_anc
                else 0.5 * (aR - aQ1) + 0.5 * (aC - aQ2) - aS)
    elif kind == "GE2":
        vV, cV, aV = _piece_ln_period_score(inp, diagnostics)
        vB, cB, aB = _piece_ln_unit_bracket(inp, L, diagnostics)
        val = vlnR + vlnC + vV + vB
        acc.add(cR + cC + cV + cB,
                None if not inp.need_anc else aR + aC + aV + aB)
    else:  # pragma: no cover
        raise ContractError(f"unhandled kind {kind}")
    if spec.mode == "penalty":
        # the integrated-likelihood route carries an extra 1/2 ln det(H) term;
        # the joint-likelihood penalty drops it
        val -= 0.5 * (vlnR + vlnC)
        acc.add(-0.5 * (cR + cC), None if not inp.need_anc else -0.5 * (aR + aC))
    if not want_grad:
        return CorrectionValue(val, None, None, None, diagnostics)
    gb, ga, gg = acc.finish()
    return CorrectionValue(val, gb, ga, gg, diagnostics)


# ---------------------------------------------------------------------------
# AR(m) prior (doubles as the joint-likelihood penalty)
# ---------------------------------------------------------------------------


def _ar_correction(spec, data, family, state, diagnostics):
    # Each unit's incidental effect contributes one Lancaster-type term S/T,
    # so the estimation prior carries the panel weight N/T; it reduces to the
    # bare series exactly when N = T.
    m = family.n_lags
    mu = np.asarray(state.beta[:m], dtype=float)
    T = data.n_periods
    weight = data.n_units / T
    val = weight * ar_log_prior(mu, T)
    gmu = weight * ar_prior_gradient(mu, T)
    if ar_unstable(mu):
        diagnostics["ar_unstable"] = True
    gb = np.zeros(family.beta_dim(data.n_regressors))
    gb[:m] = gmu
    return CorrectionValue(val, gb, np.zeros(data.n_units), np.zeros(data.n_periods),
                           diagnostics)


def ar_prior_gradient(mu, T):
    """d/d mu_k of the AR log prior series, via the psi recursion."""
    mu = np.asarray(mu, dtype=float)
    m = mu.size
    psi = ar_psi_weights(mu, max(T, 1))
    return np.array(
        [sum((T - k - h) * psi[h] for h in range(0, T - k)) for k in range(1, m + 1)]
    )


def ar_power_sums(mu, n_terms):
    """Power sums s_t = sum_k r_k^t of the AR characteristic roots.

    Newton's identities give s_t = sum_{j<=min(m,t-1)} mu_j s_{t-j} + t mu_t
    without any root finding.
    """
    mu = np.asarray(mu, dtype=float)
    m = mu.size
    s = np.zeros(n_terms + 1)
    for t in range(1, n_terms + 1):
        acc = mu[t - 1] * t if t <= m else 0.0
        for j in range(1, min(m, t - 1) + 1):
            acc += mu[j - 1] * s[t - j]
        s[t] = acc
    return s[1:]


def ar_psi_weights(mu, n_terms):
    """MA(infinity) weights psi_h of the AR recursion (psi_0 = 1)."""
    mu = np.asarray(mu, dtype=float)
    m = mu.size
    psi = np.zeros(n_terms)
    psi[0] = 1.0
    for h in range(1, n_terms):
        psi[h] = sum(mu[l - 1] * psi[h - l] for l in range(1, min(m, h) + 1))
    return psi


def ar_log_prior(mu, T):
    """sum_{t=1}^{T-1} ((T-t)/t) sum_k r_k^t, via power sums."""
    if T < 2:
        return 0.0
    s = ar_power_sums(mu, T - 1)
    t = np.arange(1, T)
    return float((((T - t) / t) * s).sum())


def ar_unstable(mu, probe=512):
    """Flags a root at or outside the unit circle via diverging power sums."""
    s = ar_power_sums(mu, probe)
    m = max(np.atleast_1d(mu).size, 1)
    if not np.isfinite(s).all():
        return True
    return bool(np.abs(s[64:]).max() > m + 1e-8 or abs(s[-1]) > 0.5)


# ---------------------------------------------------------------------------
# multinomial corrections (SML / PML)
# ---------------------------------------------------------------------------


def _ridge_blocks(blocks, d, diagnostics, label):
    out = blocks.copy()
    count = 0
    for idx in range(blocks.shape[0]):
        w = np.linalg.eigvalsh(blocks[idx])
        if w.min() < _FLOOR:
            out[idx] = blocks[idx] + np.eye(d) * (
                _RIDGE * max(np.trace(blocks[idx]), _FLOOR) / d
            )
            count += 1
    if count:
        diagnostics[label] = diagnostics.get(label, 0) + count
    return out


def _mnl_correction(spec, data, family, state, want_grad, diagnostics):
    d = family.index_dim
    N, T = data.n_units, data.n_periods
    K = data.n_regressors
    eta = build_index(data, family, state)
    b = fam.mnl_derivs(family, data.outcomes, eta, order=3)
    negd2 = -b.d2
    D = _ridge_blocks(negd2.sum(axis=1), d, diagnostics, "ridged_unit_blocks")
    Ct = _ridge_blocks(negd2.sum(axis=0), d, diagnostics, "ridged_period_blocks")
    sign_d, logdet_d = np.linalg.slogdet(D)
    sign_c, logdet_c = np.linalg.slogdet(Ct)
    if (sign_d <= 0).any() or (sign_c <= 0).any():
        raise DegeneratePanelError("summed Hessian block is not positive definite")
    v_lnD = float(logdet_d.sum())
    v_lnC = float(logdet_c.sum())
    Dinv = np.linalg.inv(D)
    Cinv = np.linalg.inv(Ct)
    # d lndet / d eta_{ita}: trace of the inverse against -d3[a]
    cell_lnD = -np.einsum("nbc,ntabc->nta", Dinv, b.d3)
    cell_lnC = -np.einsum("tbc,ntabc->nta", Cinv, b.d3)
    val = v_lnD + v_lnC
    cells = cell_lnD + cell_lnC
    if spec.kind == "PML" and (not data.all_strict or spec.expectation == "observed"):
        L = spec.effective_lag(T)
        s = b.d1
        G = np.zeros((N, d, d))
        pads = np.zeros((N, T, d))
        for tau in range(1, L + 1):
            lam = T / (T - tau)
            G += lam * np.einsum("nta,ntb->nab", s[:, tau:], s[:, :T - tau])
            pads[:, :T - tau] += lam * s[:, tau:]
            pads[:, tau:] += lam * s[:, :T - tau]
        tr_sp = np.einsum("nab,nab->n", Dinv, G)
        val -= float(tr_sp.sum())
        if want_grad:
            # through the score products: d s_{iu}[b] / d eta_{iua} = d2[b,a]
            part = np.einsum("nab,ntb->nta", Dinv, pads)
            cell_sp = np.einsum("ntba,ntb->nta", b.d2, part)
            # through the denominator blocks: + tr(Dinv G Dinv dD)
            DGD = Dinv @ G @ Dinv
            DGD = 0.5 * (DGD + DGD.transpose(0, 2, 1))
            cell_sp += np.einsum("nbc,ntabc->nta", DGD, b.d3)
            cells -= cell_sp
    if spec.mode == "penalty":
        val -= 0.5 * (v_lnD + v_lnC)
        cells -= 0.5 * (cell_lnD + cell_lnC)
    if not want_grad:
        return CorrectionValue(val, None, None, None, diagnostics)
    ga = cells.sum(axis=1)
    gg = cells.sum(axis=0)
    gb = np.einsum("nta,ntk->ak", cells, data.regressors).reshape(d * K)
    return CorrectionValue(val, gb, ga, gg, diagnostics)


# ---------------------------------------------------------------------------
# Upsilon field
# ---------------------------------------------------------------------------


def upsilon(data, family, state, L=None, expectation="mixed", ref_state=None):
    """Observation-level bias contributions, trimmed at lag L.

    Denominators are the unit/period sums of E[d2]; they must be strictly
    negative or the panel is degenerate.
    """
    T = data.n_periods
    if L is None:
        L = CorrectionSpec(kind="GE1").effective_lag(T)
    if L >= T:
        raise ContractError(f"trim lag {L} must be smaller than T={T}")
    if family.kind == "multinomial-logit":
        return _upsilon_mnl(data, family, state, L, expectation, ref_state)
    spec = CorrectionSpec(kind="GE1", trim_lag=L, expectation=expectation)
    inp = _ScalarInputs(spec, data, family, state, ref_state=ref_state)
    Dr = inp.e2.sum(axis=1)
    Dc = inp.e2.sum(axis=0)
    _check_negative(Dr, data.unit_ids, "unit")
    _check_negative(Dc, data.period_ids, "period")
    num = inp.e3 + inp.e2s
    cross = _cross_field(inp, L)
    ups_pi = num / Dr[:, None] + num / Dc[None, :] + cross / Dr[:, None]
    x = data.regressors
    numb = num[..., None] * x
    crossb = _cross_field_beta(inp, L, x)
    ups_b = (
        numb / Dr[:, None, None] + numb / Dc[None, :, None]
        + crossb / Dr[:, None, None]
    )
    if inp.need_anc:
        numa = inp.eanc2 + inp.eanc1s
        crossa = _cross_field_anc(inp, L)
        ups_a = (
            numa / Dr[:, None, None] + numa / Dc[None, :, None]
            + crossa / Dr[:, None, None]
        )
        ups_b = np.concatenate([ups_b, ups_a], axis=2)
    return UpsilonField(upsilon_pi=ups_pi, upsilon_beta=ups_b)


def _check_negative(vals, ids, what):
    bad = np.flatnonzero(vals >= -_FLOOR)
    if bad.size:
        label = ids[bad[0]]
        raise DegeneratePanelError(
            f"expected curvature sum for {what} {label!r} is not strictly negative",
            **{what: label},
        )


def _cross_field(inp, L):
    """cross_{it} = sum_tau lam_tau E[d2_{i,t+tau} d1_{it}] per cell."""
    N, T = inp.N, inp.T
    out = np.zeros((N, T))
    if inp.cross_zero and inp.mode != "analytical":
        return out
    if inp.mode == "analytical":
        lead_fac, lag_fac = inp.e2, inp.es1
    else:
        lead_fac, lag_fac = inp.ds, inp.s
    for tau in range(1, L + 1):
        lam = T / (T - tau)
        out[:, :T - tau] += lam * lead_fac[:, tau:] * lag_fac[:, :T - tau]
    return out


def _cross_field_beta(inp, L, x):
    N, T = inp.N, inp.T
    out = np.zeros((N, T, x.shape[2]))
    if inp.cross_zero and inp.mode != "analytical":
        return out
    if inp.mode == "analytical":
        lead_fac, lag_fac = inp.e2, inp.es1
    else:
        lead_fac, lag_fac = inp.ds, inp.s
    for tau in range(1, L + 1):
        lam = T / (T - tau)
        out[:, :T - tau] += (
            lam * (lead_fac[:, tau:] * lag_fac[:, :T - tau])[..., None] * x[:, tau:]
        )
    return out


def _cross_field_anc(inp, L):
    N, T, A = inp.N, inp.T, inp.A
    out = np.zeros((N, T, A))
    if inp.cross_zero or inp.mode == "analytical":
        return out
    for tau in range(1, L + 1):
        lam = T / (T - tau)
        out[:, :T - tau] += lam * inp.dsa[:, tau:] * inp.s[:, :T - tau, None]
    return out


def _upsilon_mnl(data, family, state, L, expectation, ref_state):
    d = family.index_dim
    N, T = data.n_units, data.n_periods
    K = data.n_regressors
    eta = build_index(data, family, state)
    b = fam.mnl_derivs(family, data.outcomes, eta, order=3)
    at = None
    if ref_state is not None:
        at = (build_index(data, family, ref_state), ())
    eb = fam.mnl_expected(family, eta, at=at)
    if expectation == "observed":
        num = b.d3 + np.einsum("ntab,ntc->ntabc", b.d2, b.d1)
    else:
        num = eb.e3 + eb.e2s  # e2s[a,b,c] = E[d2[a,b] d1[c]]
    Dr = eb.e2.sum(axis=1)
    Dc = eb.e2.sum(axis=0)
    for i in range(N):
        if np.linalg.eigvalsh(Dr[i]).max() >= -_FLOOR:
            raise DegeneratePanelError("unit curvature block not negative definite",
                                       unit=data.unit_ids[i])
    for t in range(T):
        if np.linalg.eigvalsh(Dc[t]).max() >= -_FLOOR:
            raise DegeneratePanelError("period curvature block not negative definite",
                                       period=data.period_ids[t])
    Drinv = np.linalg.inv(Dr)
    Dcinv = np.linalg.inv(Dc)
    base = (
        np.einsum("nbc,ntabc->nta", Drinv, num)
        + np.einsum("tbc,ntabc->nta", Dcinv, num)
    )
    # cross core q[i,t,a] = d2_{i,t+tau}[a,:] . Drinv_i . s_{i,t}
    cross_pi = np.zeros((N, T, d))
    crossb = np.zeros((N, T, d, K))
    cross_zero = data.all_strict and expectation != "observed"
    if expectation != "analytical" and not cross_zero:
        s = b.d1
        for tau in range(1, L + 1):
            lam = T / (T - tau)
            w = np.einsum("nbc,ntc->ntb", Drinv, s[:, :T - tau])
            q = np.einsum("ntab,ntb->nta", b.d2[:, tau:], w)
            cross_pi[:, :T - tau] += lam * q
            crossb[:, :T - tau] += lam * q[..., None] * data.regressors[:, tau:, None, :]
    ups_pi = base + cross_pi
    ups_beta = base[..., None] * data.regressors[:, :, None, :] + crossb
    return UpsilonField(upsilon_pi=ups_pi,
                        upsilon_beta=ups_beta.reshape(N, T, d * K))


# ---------------------------------------------------------------------------
# differential-system verification and the add-on correction
# ---------------------------------------------------------------------------


def verify_differential_system(spec, data, family, state, fd_step=1e-5,
                               value_fn=None):
    """Compare finite-difference log-correction gradients against Upsilon sums.

    Both sides are evaluated with the outcome measure frozen at ``state``
    and cross-time products factorized, which zeroes the mean-zero remainder
    terms and makes the comparison exact for priors that integrate the bias
    contributions.  Returns per-block maximum discrepancies.
    """
    ups = upsilon(data, family, state,
                  L=spec.effective_lag(data.n_periods) if spec.kind != "Flat" else None,
                  expectation="analytical", ref_state=state)
    if value_fn is None:
        eval_spec = replace(spec, expectation="analytical")

        def value_fn(st):
            return log_correction(eval_spec, data, family, st,
                                  want_grad=False, ref_state=state).value

    fd_beta = _fd_grad_beta(value_fn, state, fd_step)
    fd_alpha, fd_gamma = _fd_grad_phi(value_fn, state, fd_step)
    diff_alpha = fd_alpha - ups.alpha_sums()
    diff_gamma = fd_gamma - ups.gamma_sums()
    diff_beta = fd_beta - ups.beta_sum()
    return {
        "max_alpha": float(np.abs(diff_alpha).max()),
        "max_gamma": float(np.abs(diff_gamma).max()),
        "max_beta": float(np.abs(diff_beta).max()) if diff_beta.size else 0.0,
        "alpha": diff_alpha,
        "gamma": diff_gamma,
        "beta": diff_beta,
        "upsilon": ups,
    }


def _fd_grad_beta(value_fn, state, h):
    beta = state.beta
    out = np.zeros_like(beta)
    for j in range(beta.size):
        bp, bm = beta.copy(), beta.copy()
        bp[j] += h
        bm[j] -= h
        out[j] = (value_fn(replace(state, beta=bp))
                  - value_fn(replace(state, beta=bm))) / (2 * h)
    return out


def _fd_grad_phi(value_fn, state, h):
    ga = np.zeros(state.alpha.shape)
    gg = np.zeros(state.gamma.shape)
    for idx in np.ndindex(state.alpha.shape):
        ap, am = state.alpha.copy(), state.alpha.copy()
        ap[idx] += h
        am[idx] -= h
        ga[idx] = (value_fn(replace(state, alpha=ap))
                   - value_fn(replace(state, alpha=am))) / (2 * h)
    for idx in np.ndindex(state.gamma.shape):
        gp, gm = state.gamma.copy(), state.gamma.copy()
        gp[idx] += h
        gm[idx] -= h
        gg[idx] = (value_fn(replace(state, gamma=gp))
                   - value_fn(replace(state, gamma=gm))) / (2 * h)
    return ga, gg


def addon_cross_terms(data, family, state, L=None, expectation="mixed"):
    """Per-unit cross-time bias blocks B_i^(theta,1) for theta in {beta, pi}.

    Returns (B_beta, B_pi): B_beta is (N, P); B_pi is (N,).  Denominators are
    the unit sums of E[d2] (kept signed, as displayed).
    """
    if family.kind not in ("logit", "poisson"):
        raise ValidationError("the add-on correction targets exponential-family panels")
    T = data.n_periods
    if L is None:
        L = CorrectionSpec(kind="PE").effective_lag(T)
    spec = CorrectionSpec(kind="GE1", trim_lag=L, expectation=expectation)
    inp = _ScalarInputs(spec, data, family, state)
    denom = inp.e2.sum(axis=1)
    _check_negative(denom, data.unit_ids, "unit")
    if expectation == "analytical":
        lead, lag = inp.e2, inp.es1
    else:
        lead, lag = inp.ds, inp.s
    num_pi = np.zeros(data.n_units)
    num_beta = np.zeros((data.n_units, data.n_regressors))
    x = data.regressors
    for tau in range(1, L + 1):
        lam = T / (T - tau)
        prod = lead[:, tau:] * lag[:, :T - tau]
        num_pi += lam * prod.sum(axis=1)
        num_beta += lam * (prod[..., None] * x[:, tau:]).sum(axis=1)
    return num_beta / denom[:, None], num_pi / denom
