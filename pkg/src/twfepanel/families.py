"""Per-observation log-likelihood families and their analytic derivatives.

Every family exposes the per-cell log likelihood and its partial derivatives
with respect to the linear index pi (up to third order) and with respect to
ancillary parameters (ordered-response cutoffs, the gaussian innovation scale).
Mixed beta x pi derivatives follow from the chain rule through the index and
are assembled by the likelihood layer.

Expectation bundles integrate the same derivatives against the model-implied
outcome distribution.  By default the distribution is evaluated at the same
parameter point as the derivatives; passing a reference point freezes the
distribution there, which is what exact differential-system checks need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ContractError, DomainError

VALID_FAMILIES = (
    "logit",
    "probit",
    "poisson",
    "ordered-logit",
    "multinomial-logit",
    "gaussian-ar",
)

# Probabilities are clamped before logs; extreme fixed effects during MCMC
# exploration otherwise produce -inf.
PROB_FLOOR = 1e-12

_SQRT_2OPI = np.sqrt(2.0 / np.pi)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ModelFamily:
    """A likelihood family plus the shape information the engine needs.

    Parameters
    ----------
    kind : str
        One of ``logit``, ``probit``, ``poisson``, ``ordered-logit``,
        ``multinomial-logit``, ``gaussian-ar``.
    n_categories : int
        Number of outcome categories J (ordered / multinomial only).
    tau1 : float
        The pinned first cutoff of the ordered model (location normalization).
    n_lags : int
        Autoregressive order m (gaussian-ar only).
    """

    kind: str
    n_categories: int = 2
    tau1: float = 0.0
    n_lags: int = 1

    def __post_init__(self):
        if self.kind not in VALID_FAMILIES:
            raise DomainError(f"unknown family {self.kind!r}")
        if self.kind in ("ordered-logit", "multinomial-logit") and self.n_categories < 2:
            raise DomainError("categorical families need n_categories >= 2")
        if self.kind == "ordered-logit" and self.n_categories < 3:
            raise DomainError("ordered-logit needs at least 3 categories")
        if self.kind == "gaussian-ar" and self.n_lags < 1:
            raise DomainError("gaussian-ar needs n_lags >= 1")

    @property
    def index_dim(self):
        """Dimension of the fixed-effect index per cell."""
        return self.n_categories - 1 if self.kind == "multinomial-logit" else 1

    @property
    def n_ancillary(self):
        """Free ancillary parameters appended to beta."""
        if self.kind == "ordered-logit":
            return self.n_categories - 2  # tau_2 .. tau_{J-1}; tau_1 pinned
        if self.kind == "gaussian-ar":
            return 1  # sigma
        return 0

    def beta_dim(self, n_regressors):
        if self.kind == "multinomial-logit":
            return n_regressors * self.index_dim
        return n_regressors + self.n_ancillary

    def split_beta(self, beta, n_regressors):
        """Split the packed beta vector into (slopes, ancillary).

        Multinomial slopes come back as a (index_dim, K) matrix, one row per
        non-base category; other families as a length-K vector.
        """
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.beta_dim(n_regressors),):
            raise ContractError(
                f"beta has length {beta.size}, expected {self.beta_dim(n_regressors)}"
            )
        if self.kind == "multinomial-logit":
            return beta.reshape(self.index_dim, n_regressors), beta[:0]
        if self.n_ancillary:
            return beta[:n_regressors], beta[n_regressors:]
        return beta, beta[:0]

    def beta_labels(self, reg_names):
        """Human-readable labels matching the packed beta layout."""
        if self.kind == "multinomial-logit":
            return [
                f"{name}:cat{k}" for k in range(2, self.n_categories + 1) for name in reg_names
            ]
        labels = list(reg_names)
        if self.kind == "ordered-logit":
            labels += [f"tau{j}" for j in range(2, self.n_categories)]
        elif self.kind == "gaussian-ar":
            labels += ["sigma"]
        return labels

    def cutoffs(self, anc):
        """Full increasing cutoff vector (tau_1 pinned first)."""
        cuts = np.concatenate(([self.tau1], np.asarray(anc, dtype=float)))
        if np.any(np.diff(cuts) <= 0):
            raise DomainError(f"cutoffs must be strictly increasing, got {cuts}")
        return cuts

    def check_outcomes(self, y):
        y = np.asarray(y)
        if self.kind in ("logit", "probit"):
            if not np.isin(y, (0, 1)).all():
                raise DomainError("binary outcomes must lie in {0, 1}")
        elif self.kind == "poisson":
            if np.any(y < 0) or np.any(y != np.floor(y)):
                raise DomainError("poisson outcomes must be nonnegative integers")
        elif self.kind in ("ordered-logit", "multinomial-logit"):
            if np.any(y < 1) or np.any(y > self.n_categories) or np.any(y != np.floor(y)):
                raise DomainError(
                    f"categorical outcomes must lie in 1..{self.n_categories}"
                )

    def check_ancillary(self, anc):
        anc = np.asarray(anc, dtype=float)
        if anc.shape != (self.n_ancillary,):
            raise ContractError(
                f"ancillary block has length {anc.size}, expected {self.n_ancillary}"
            )
        if self.kind == "ordered-logit":
            self.cutoffs(anc)
        if self.kind == "gaussian-ar" and anc[0] <= 0:
            raise DomainError("gaussian-ar sigma must be positive")


@dataclass
class DerivBundle:
    """Realized per-cell index derivatives.

    ``d1``..``d3`` are plain index partials; ``danc*`` hold the mixed
    ancillary x pi partials (last axis runs over ancillary parameters).
    """

    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    danc: np.ndarray | None = None      # dl/danc
    danc1: np.ndarray | None = None     # d2l/danc dpi
    danc2: np.ndarray | None = None     # d3l/danc dpi2
    dancanc: np.ndarray | None = None   # d2l/danc danc'


@dataclass
class EBundle:
    """Model-implied expectations of derivative products, per cell.

    ``e2``/``e3`` are E[d2], E[d3]; ``ess`` is E[d1^2]; ``e2s`` is E[d2*d1].
    ``de2``/``dess`` are the eta-derivatives of e2/ess (zero measure motion
    when a reference point is frozen).  Ancillary analogues follow the same
    naming.
    """

    e2: np.ndarray
    e3: np.ndarray
    ess: np.ndarray
    e2s: np.ndarray
    de2: np.ndarray
    dess: np.ndarray
    de2_anc: np.ndarray | None = None    # d e2 / d anc
    dess_anc: np.ndarray | None = None
    eanc2: np.ndarray | None = None      # E[d3l/danc dpi2]
    eanc1s: np.ndarray | None = None     # E[(d2l/danc dpi) * d1]


# ---------------------------------------------------------------------------
# scalar-index families
# ---------------------------------------------------------------------------


def _logit_pieces(eta):
    F = special.expit(eta)
    f = F * (1.0 - F)
    return F, f


def _probit_mills(eta):
    # phi/Phi evaluated stably for all eta via the scaled complement erfcx.
    return _SQRT_2OPI / special.erfcx(-eta / np.sqrt(2.0))


def _ordered_cell_pieces(family, eta, cuts, k):
    """CDF/density pieces of the outcome-k cell probability P_k(eta)."""
    J = family.n_categories
    b = (cuts[k - 1] - eta) if k <= J - 1 else np.full_like(eta, np.inf)
    a = (cuts[k - 2] - eta) if k >= 2 else np.full_like(eta, -np.inf)
    Fb = special.expit(b)
    Fa = special.expit(a)
    fb = Fb * (1.0 - Fb)
    fa = Fa * (1.0 - Fa)
    fpb = fb * (1.0 - 2.0 * Fb)
    fpa = fa * (1.0 - 2.0 * Fa)
    fppb = fb * (1.0 - 6.0 * Fb + 6.0 * Fb ** 2)
    fppa = fa * (1.0 - 6.0 * Fa + 6.0 * Fa ** 2)
    P = np.clip(Fb - Fa, PROB_FLOOR, 1.0)
    return P, (fa, fb), (fpa, fpb), (fppa, fppb)


def loglik_cells(family, y, eta, anc=()):
    """Per-cell log likelihood; eta is the full linear index.

    For multinomial, eta has a trailing index_dim axis; for gaussian-ar it is
    the full conditional mean (lags already folded in).
    """
    y = np.asarray(y)
    eta = np.asarray(eta, dtype=float)
    kind = family.kind
    if kind == "logit":
        return y * eta - np.logaddexp(0.0, eta)
    if kind == "probit":
        return np.where(y == 1, special.log_ndtr(eta), special.log_ndtr(-eta))
    if kind == "poisson":
        return y * eta - np.exp(eta) - special.gammaln(y + 1.0)
    if kind == "ordered-logit":
        cuts = family.cutoffs(anc)
        out = np.empty_like(eta)
        for k in range(1, family.n_categories + 1):
            mask = y == k
            if not mask.any():
                continue
            P, _, _, _ = _ordered_cell_pieces(family, eta[mask], cuts, k)
            out[mask] = np.log(P)
        return out
    if kind == "multinomial-logit":
        m = np.maximum(eta.max(axis=-1), 0.0)
        lse = m + np.log(
            np.exp(-m) + np.exp(eta - m[..., None]).sum(axis=-1)
        )
        vy = np.zeros_like(lse)
        for k in range(2, family.n_categories + 1):
            mask = y == k
            if mask.any():
                vy[mask] = eta[..., k - 2][mask]
        return vy - lse
    if kind == "gaussian-ar":
        sigma = float(anc[0])
        eps = y - eta
        return -_LOG_SQRT_2PI - np.log(sigma) - 0.5 * (eps / sigma) ** 2
    raise DomainError(f"unknown family {kind!r}")


def deriv_cells(family, y, eta, anc=(), need_anc=False):
    """Realized per-cell derivative bundle at the given parameters."""
    y = np.asarray(y)
    eta = np.asarray(eta, dtype=float)
    kind = family.kind
    if kind == "logit":
        F, f = _logit_pieces(eta)
        return DerivBundle(d1=y - F, d2=-f, d3=-f * (1.0 - 2.0 * F))
    if kind == "probit":
        r1 = _probit_mills(eta)
        r0 = _probit_mills(-eta)
        up = y == 1
        d1 = np.where(up, r1, -r0)
        d2 = np.where(up, -r1 * (eta + r1), -r0 * (r0 - eta))
        d3 = np.where(
            up,
            r1 * (eta + r1) * (eta + 2.0 * r1) - r1,
            (r0 ** 2 - eta * r0) * (eta - 2.0 * r0) + r0,
        )
        return DerivBundle(d1=d1, d2=d2, d3=d3)
    if kind == "poisson":
        om = np.exp(eta)
        return DerivBundle(d1=y - om, d2=-om, d3=-om)
    if kind == "ordered-logit":
        return _ordered_derivs(family, y, eta, anc, need_anc)
    if kind == "gaussian-ar":
        sigma = float(anc[0])
        eps = y - eta
        d1 = eps / sigma ** 2
        d2 = np.full_like(eta, -1.0 / sigma ** 2)
        d3 = np.zeros_like(eta)
        if not need_anc:
            return DerivBundle(d1=d1, d2=d2, d3=d3)
        danc = (-1.0 / sigma + eps ** 2 / sigma ** 3)[..., None]
        danc1 = (-2.0 * eps / sigma ** 3)[..., None]
        danc2 = np.full_like(eta, 2.0 / sigma ** 3)[..., None]
        dancanc = (1.0 / sigma ** 2 - 3.0 * eps ** 2 / sigma ** 4)[..., None, None]
        return DerivBundle(d1, d2, d3, danc, danc1, danc2, dancanc)
    if kind == "multinomial-logit":
        raise ContractError("use mnl_derivs for the multinomial family")
    raise DomainError(f"unknown family {kind!r}")


def _ordered_derivs(family, y, eta, anc, need_anc):
    cuts = family.cutoffs(anc)
    J = family.n_categories
    A = family.n_ancillary
    shape = np.shape(eta)
    d1 = np.empty(shape)
    d2 = np.empty(shape)
    d3 = np.empty(shape)
    danc = np.zeros(shape + (A,)) if need_anc else None
    danc1 = np.zeros(shape + (A,)) if need_anc else None
    danc2 = np.zeros(shape + (A,)) if need_anc else None
    dancanc = np.zeros(shape + (A, A)) if need_anc else None
    for k in range(1, J + 1):
        mask = np.asarray(y) == k
        if not mask.any():
            continue
        vals = _ordered_derivs_at(family, eta[mask], cuts, k, need_anc)
        d1[mask], d2[mask], d3[mask] = vals[:3]
        if need_anc:
            danc[mask], danc1[mask], danc2[mask], dancanc[mask] = vals[3:]
    return DerivBundle(d1, d2, d3, danc, danc1, danc2, dancanc)


def _ordered_derivs_at(family, eta, cuts, k, need_anc):
    """Derivatives of ln P_k(eta, cuts) for a fixed outcome k."""
    J = family.n_categories
    A = family.n_ancillary
    P, (fa, fb), (fpa, fpb), (fppa, fppb) = _ordered_cell_pieces(family, eta, cuts, k)
    P1 = fa - fb
    P2 = fpb - fpa
    P3 = fppa - fppb
    d1 = P1 / P
    d2 = P2 / P - d1 ** 2
    d3 = P3 / P - 3.0 * (P2 / P) * d1 + 2.0 * d1 ** 3
    if not need_anc:
        return d1, d2, d3
    danc = np.zeros(eta.shape + (A,))
    danc1 = np.zeros(eta.shape + (A,))
    danc2 = np.zeros(eta.shape + (A,))
    dancanc = np.zeros(eta.shape + (A, A))
    # Free cutoff j (0-based ancillary slot) is cuts[j + 1].
    for j in range(A):
        cut_idx = j + 1
        up = 1.0 if (k <= J - 1 and cut_idx == k - 1) else 0.0
        lo = 1.0 if (k >= 2 and cut_idx == k - 2) else 0.0
        if up == 0.0 and lo == 0.0:
            continue
        N = fb * up - fa * lo
        N1 = -fpb * up + fpa * lo
        N2 = fppb * up - fppa * lo
        danc[..., j] = N / P
        danc1[..., j] = N1 / P - N * P1 / P ** 2
        danc2[..., j] = (
            N2 / P - 2.0 * N1 * P1 / P ** 2 - N * P2 / P ** 2 + 2.0 * N * P1 ** 2 / P ** 3
        )
        for l in range(A):
            cut_l = l + 1
            up_l = 1.0 if (k <= J - 1 and cut_l == k - 1) else 0.0
            lo_l = 1.0 if (k >= 2 and cut_l == k - 2) else 0.0
            dN = fpb * up * up_l - fpa * lo * lo_l
            N_l = fb * up_l - fa * lo_l
            dancanc[..., j, l] = dN / P - N * N_l / P ** 2
    return d1, d2, d3, danc, danc1, danc2, dancanc


def outcome_support(family, eta, anc=(), at=None):
    """Yield (outcome value, probability array) pairs for discrete families.

    ``at`` optionally supplies a (eta, anc) pair at which the probabilities
    are evaluated, freezing the outcome measure there.
    """
    eta_p, anc_p = (eta, anc) if at is None else at
    kind = family.kind
    if kind == "logit":
        F = special.expit(eta_p)
        yield 0, 1.0 - F
        yield 1, F
    elif kind == "probit":
        F = special.ndtr(eta_p)
        yield 0, 1.0 - F
        yield 1, F
    elif kind == "ordered-logit":
        cuts = family.cutoffs(anc_p)
        for k in range(1, family.n_categories + 1):
            P, _, _, _ = _ordered_cell_pieces(family, eta_p, cuts, k)
            yield k, P
    else:
        raise ContractError(f"{kind} has no finite outcome enumeration")


def expected_cells(family, eta, anc=(), at=None, need_anc=False):
    """Model-implied expectation bundle, cell by cell.

    With ``at=None`` the outcome distribution moves with the evaluation point,
    so chain-rule terms like dE[d2]/deta pick up the score-weighted piece.
    With a frozen reference, only the inner derivatives move.
    """
    eta = np.asarray(eta, dtype=float)
    kind = family.kind
    frozen = at is not None
    if kind == "poisson":
        om = np.exp(eta)
        if not frozen:
            return EBundle(e2=-om, e3=-om, ess=om, e2s=np.zeros_like(om),
                           de2=-om, dess=om)
        om_r = np.exp(np.asarray(at[0], dtype=float))
        gap = om_r - om
        return EBundle(e2=-om, e3=-om, ess=om_r + gap ** 2, e2s=-om * gap,
                       de2=-om, dess=2.0 * om * (om - om_r))
    if kind == "gaussian-ar":
        sigma = float(anc[0])
        z = np.zeros_like(eta)
        s2 = sigma ** 2
        if not frozen:
            bundle = EBundle(e2=z - 1.0 / s2, e3=z.copy(), ess=z + 1.0 / s2,
                             e2s=z.copy(), de2=z.copy(), dess=z.copy())
            if need_anc:
                bundle.de2_anc = (z + 2.0 / sigma ** 3)[..., None]
                bundle.dess_anc = (z - 2.0 / sigma ** 3)[..., None]
                bundle.eanc2 = (z + 2.0 / sigma ** 3)[..., None]
                bundle.eanc1s = (z - 2.0 / sigma ** 3)[..., None]
            return bundle
        eta_r = np.asarray(at[0], dtype=float)
        sig_r = float(at[1][0])
        gap = eta_r - eta
        ess = (sig_r ** 2 + gap ** 2) / s2 ** 2
        bundle = EBundle(e2=z - 1.0 / s2, e3=z.copy(), ess=ess,
                         e2s=-gap / s2 ** 2, de2=z.copy(), dess=-2.0 * gap / s2 ** 2)
        if need_anc:
            bundle.de2_anc = (z + 2.0 / sigma ** 3)[..., None]
            bundle.dess_anc = (-4.0 * ess / sigma)[..., None]
            bundle.eanc2 = (z + 2.0 / sigma ** 3)[..., None]
            bundle.eanc1s = (-2.0 * (sig_r ** 2 + gap ** 2) / sigma ** 5)[..., None]
        return bundle
    if kind not in ("logit", "probit", "ordered-logit"):
        raise ContractError(f"use mnl_expected for {kind}")

    A = family.n_ancillary if need_anc else 0
    shape = eta.shape
    out = EBundle(
        e2=np.zeros(shape), e3=np.zeros(shape), ess=np.zeros(shape),
        e2s=np.zeros(shape), de2=np.zeros(shape), dess=np.zeros(shape),
    )
    if A:
        out.de2_anc = np.zeros(shape + (A,))
        out.dess_anc = np.zeros(shape + (A,))
        out.eanc2 = np.zeros(shape + (A,))
        out.eanc1s = np.zeros(shape + (A,))
    for k, pk in outcome_support(family, eta, anc, at=at):
        yk = np.full(shape, k)
        b = deriv_cells(family, yk, eta, anc, need_anc=need_anc)
        pdot = 0.0 if frozen else pk * b.d1  # dP_k/deta at the moving measure
        out.e2 += pk * b.d2
        out.e3 += pk * b.d3
        out.ess += pk * b.d1 ** 2
        out.e2s += pk * b.d2 * b.d1
        out.de2 += pdot * b.d2 + pk * b.d3
        out.dess += pdot * b.d1 ** 2 + pk * 2.0 * b.d1 * b.d2
        if A:
            panc = 0.0 if frozen else pk[..., None] * b.danc  # dP_k/danc
            out.de2_anc += panc * b.d2[..., None] + pk[..., None] * b.danc2
            out.dess_anc += (
                panc * (b.d1 ** 2)[..., None]
                + pk[..., None] * 2.0 * b.d1[..., None] * b.danc1
            )
            out.eanc2 += pk[..., None] * b.danc2
            out.eanc1s += pk[..., None] * b.danc1 * b.d1[..., None]
    return out


# ---------------------------------------------------------------------------
# multinomial vector path
# ---------------------------------------------------------------------------


def mnl_probs(eta):
    """Choice probabilities of non-base categories; eta is (..., d)."""
    m = np.maximum(eta.max(axis=-1), 0.0)
    ex = np.exp(eta - m[..., None])
    denom = np.exp(-m) + ex.sum(axis=-1)
    return ex / denom[..., None]


def mnl_derivs(family, y, eta, order=3):
    """Realized multinomial derivative bundle with vector/matrix/tensor parts."""
    p = mnl_probs(eta)
    d = family.index_dim
    ind = np.zeros_like(p)
    for k in range(2, family.n_categories + 1):
        ind[..., k - 2] = np.asarray(y) == k
    d1 = ind - p
    eye = np.eye(d)
    d2 = p[..., :, None] * p[..., None, :] - eye * p[..., :, None]
    if order < 3:
        return DerivBundle(d1=d1, d2=d2, d3=None)
    # d3[a,b,c] per the softmax third derivative.
    pa = p[..., :, None, None]
    pb = p[..., None, :, None]
    pc = p[..., None, None, :]
    dab = eye[:, :, None]
    dac = eye[:, None, :]
    dbc = eye[None, :, :]
    d3 = (
        -dab * dac * pa
        + dab * pa * pc
        + dac * pa * pb
        + dbc * pa * pb
        - 2.0 * pa * pb * pc
    )
    return DerivBundle(d1=d1, d2=d2, d3=d3)


@dataclass
class MnlEBundle:
    """Multinomial expectation bundle (matrix/tensor analogues of EBundle)."""

    e2: np.ndarray          # (..., d, d)  E[d2] = d2 (Y-free)
    e3: np.ndarray          # (..., d, d, d)
    ess: np.ndarray         # (..., d, d)  E[d1 d1']
    e2s: np.ndarray         # (..., d, d, d) E[d2 * d1_a], last axis = a


def mnl_expected(family, eta, at=None):
    eta = np.asarray(eta, dtype=float)
    b = mnl_derivs(family, np.zeros(eta.shape[:-1]), eta, order=3)
    if at is None:
        ess = -b.d2
        e2s = np.zeros(b.d2.shape + (family.index_dim,))
        return MnlEBundle(e2=b.d2, e3=b.d3, ess=ess, e2s=e2s)
    p_ref = mnl_probs(np.asarray(at[0], dtype=float))
    p = mnl_probs(eta)
    d = family.index_dim
    ess = np.zeros(eta.shape[:-1] + (d, d))
    gap = np.zeros(eta.shape[:-1] + (d,))
    # enumerate outcomes under the frozen reference measure
    base_p = 1.0 - p_ref.sum(axis=-1)
    for k in range(1, family.n_categories + 1):
        pk = base_p if k == 1 else p_ref[..., k - 2]
        d1k = -p.copy()
        if k >= 2:
            d1k[..., k - 2] += 1.0
        ess += pk[..., None, None] * d1k[..., :, None] * d1k[..., None, :]
        gap += pk[..., None] * d1k
    e2s = b.d2[..., None] * gap[..., None, None, :]
    return MnlEBundle(e2=b.d2, e3=b.d3, ess=ess, e2s=e2s)


# ---------------------------------------------------------------------------
# spec-level operations on single observations or whole arrays
# ---------------------------------------------------------------------------


def _build_index(family, beta, pi, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if family.kind == "multinomial-logit":
        slopes, _ = family.split_beta(beta, x.shape[-1])
        return np.asarray(pi, dtype=float) + x @ slopes.T, ()
    slopes, anc = family.split_beta(beta, x.shape[-1])
    return np.asarray(pi, dtype=float) + x @ slopes, anc


def loglik_obs(family, beta, pi, y, x):
    """Per-observation log likelihood at index pi (scalar or (J-1)-vector)."""
    family.check_outcomes(y)
    eta, anc = _build_index(family, beta, pi, x)
    if family.kind == "multinomial-logit":
        return float(loglik_cells(family, y, eta))
    return float(loglik_cells(family, y, eta, anc))


def dloglik_obs(family, beta, pi, y, x, order=3):
    """Derivative bundle of one observation, including beta x pi mixes.

    Returns a dict with keys ``d1``/``d2``/``d3`` (index partials; vectors,
    matrices and cubic tensors for the multinomial family), ``dbeta``
    (score), ``dbeta_dpi`` and ``dbeta_dpi2`` (mixed partials).
    """
    if order > 3:
        raise ContractError("index derivatives available up to order 3")
    family.check_outcomes(y)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    eta, anc = _build_index(family, beta, pi, x)
    if family.kind == "multinomial-logit":
        b = mnl_derivs(family, y, eta, order=3)
        d = family.index_dim
        K = x.shape[-1]
        # beta is stacked category-major: rows a*K..(a+1)*K belong to beta_a.
        dbeta = (b.d1[:, None] * x).reshape(d * K)
        dbeta_dpi = (b.d2[:, None, :] * x[None, :, None]).reshape(d * K, d)
        dbeta_dpi2 = (b.d3[:, None, :, :] * x[None, :, None, None]).reshape(d * K, d, d)
        out = {"d1": b.d1, "d2": b.d2, "dbeta": dbeta, "dbeta_dpi": dbeta_dpi}
        if order >= 3:
            out["d3"] = b.d3
            out["dbeta_dpi2"] = dbeta_dpi2
        return out
    need_anc = family.n_ancillary > 0
    b = deriv_cells(family, y, eta, anc, need_anc=need_anc)
    dbeta = b.d1 * x
    dbeta_dpi = b.d2 * x
    dbeta_dpi2 = b.d3 * x
    if need_anc:
        dbeta = np.concatenate([np.atleast_1d(dbeta), np.atleast_1d(b.danc)])
        dbeta_dpi = np.concatenate([np.atleast_1d(dbeta_dpi), np.atleast_1d(b.danc1)])
        dbeta_dpi2 = np.concatenate([np.atleast_1d(dbeta_dpi2), np.atleast_1d(b.danc2)])
    out = {"d1": b.d1, "d2": b.d2, "dbeta": dbeta, "dbeta_dpi": dbeta_dpi}
    if order >= 3:
        out["d3"] = b.d3
        out["dbeta_dpi2"] = dbeta_dpi2
    return out
