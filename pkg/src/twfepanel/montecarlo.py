"""Data-generating processes and the replication harness.

Every replication derives its own RNG stream from the base seed and the
replication index, so studies are reproducible bit for bit regardless of the
worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import corrections as corr
from . import effects as eff
from . import estimation as est
from . import mcmc
from .errors import ContractError, ValidationError
from .families import ModelFamily
from .likelihood import ParamState
from .panel import PanelData, RegressorMeta

DGP_FAMILIES = ("logit", "probit", "poisson", "ordered-logit", "multinomial-logit")


@dataclass(frozen=True)
class DgpSpec:
    """One simulated design: family, dynamics, sizes, and true parameters."""

    family: str
    dynamic: bool = False
    n_units: int = 45
    n_periods: int = 15
    beta_z: float = 1.0
    beta_y: float = 0.5
    cutoffs: tuple = (-2.5, 0.5, 2.5)
    effect_sd: float = 0.25
    z_ar_coef: float = 0.5
    z_innov_var: float = 0.5
    z0_var: float = 1.0
    n_categories: int = 0
    replications: int = 100
    base_seed: int = 20260811

    def __post_init__(self):
        if self.family not in DGP_FAMILIES:
            raise ValidationError(f"unknown DGP family {self.family!r}")
        if min(self.z_innov_var, self.z0_var) <= 0 or self.effect_sd < 0:
            raise ValidationError("DGP variances must be positive")
        if self.replications < 1:
            raise ValidationError("need at least one replication")
        if self.n_categories == 0:
            J = {"ordered-logit": 4, "multinomial-logit": 3}.get(self.family, 2)
            object.__setattr__(self, "n_categories", J)

    def make_family(self):
        if self.family == "ordered-logit":
            return ModelFamily(kind=self.family, n_categories=self.n_categories,
                               tau1=self.cutoffs[0])
        if self.family == "multinomial-logit":
            return ModelFamily(kind=self.family, n_categories=self.n_categories)
        return ModelFamily(kind=self.family)

    def true_beta(self, family):
        slopes = [self.beta_y, self.beta_z] if self.dynamic else [self.beta_z]
        if family.kind == "multinomial-logit":
            return np.tile(slopes, family.index_dim).astype(float)
        beta = list(slopes)
        if family.kind == "ordered-logit":
            beta += list(self.cutoffs[1:])
        return np.asarray(beta, dtype=float)


def _rng_for(dgp, rep, stream=0):
    seq = np.random.SeedSequence(entropy=dgp.base_seed, spawn_key=(rep, stream))
    return np.random.Generator(np.random.Philox(seq))


def chain_seed(dgp, rep, slot):
    seq = np.random.SeedSequence(entropy=dgp.base_seed, spawn_key=(rep, 100 + slot))
    return int(seq.generate_state(1)[0])


def gen_panel(dgp, replication_index):
    """Draw one panel plus the true parameter state and finite-sample APEs.

    The exogenous covariate follows the stated AR(1) with the additive
    effects in its drift; the innovation parameter is treated as a variance.
    Dynamic designs initialize the lagged outcome from the static index at a
    presample period with its own time effect; no burn-in periods are
    discarded.
    """
    family = dgp.make_family()
    rng = _rng_for(dgp, replication_index)
    N, T = dgp.n_units, dgp.n_periods
    d = family.index_dim
    if d == 1:
        alpha = rng.normal(0.0, dgp.effect_sd, N)
        gamma = rng.normal(0.0, dgp.effect_sd, T)
        drift_a, drift_g = alpha, gamma
        gamma0 = rng.normal(0.0, dgp.effect_sd)
    else:
        alpha = rng.normal(0.0, dgp.effect_sd, (N, d))
        gamma = rng.normal(0.0, dgp.effect_sd, (T, d))
        drift_a, drift_g = alpha.mean(axis=1), gamma.mean(axis=1)
        gamma0 = rng.normal(0.0, dgp.effect_sd, d)
    sd_v = np.sqrt(dgp.z_innov_var)
    z = np.empty((N, T))
    zprev = rng.normal(0.0, np.sqrt(dgp.z0_var), N)
    z0 = zprev.copy()
    for t in range(T):
        zprev = (dgp.z_ar_coef * zprev + drift_a + drift_g[t]
                 + rng.normal(0.0, sd_v, N))
        z[:, t] = zprev

    if family.kind == "multinomial-logit":
        data, truth = _gen_mnl(dgp, family, rng, alpha, gamma, gamma0, z, z0)
    else:
        data, truth = _gen_scalar(dgp, family, rng, alpha, gamma,
                                  gamma0 if d == 1 else gamma0[0], z, z0)
    effects = study_effects(dgp, family)
    true_apes = {}
    for e in effects:
        true_apes[e.label()] = eff.ape(data, family, truth, e)
    return data, truth, true_apes


def _gen_scalar(dgp, family, rng, alpha, gamma, gamma0, z, z0):
    N, T = dgp.n_units, dgp.n_periods
    kind = family.kind

    def draw_noise(size):
        if kind == "probit":
            return rng.normal(0.0, 1.0, size)
        return rng.logistic(0.0, 1.0, size)

    def discretize(latent):
        if kind in ("logit", "probit"):
            return (latent > 0).astype(int)
        y = np.ones(latent.shape, dtype=int)
        for c in dgp.cutoffs:
            y = y + (latent > c)
        return y

    if kind == "poisson":
        def draw_outcome(idx):
            return rng.poisson(np.exp(np.clip(idx, -30, 20)))
    else:
        def draw_outcome(idx):
            return discretize(idx + draw_noise(idx.shape))

    if not dgp.dynamic:
        idx = dgp.beta_z * z + alpha[:, None] + gamma[None, :]
        y = draw_outcome(idx)
        x = z[:, :, None]
        meta = (RegressorMeta(name="z"),)
    else:
        y = np.zeros((N, T), dtype=int)
        ylag = np.zeros((N, T))
        idx0 = dgp.beta_z * z0 + alpha + gamma0
        prev = draw_outcome(idx0).astype(float)
        for t in range(T):
            ylag[:, t] = prev
            idx = dgp.beta_y * prev + dgp.beta_z * z[:, t] + alpha + gamma[t]
            y[:, t] = draw_outcome(idx)
            prev = y[:, t].astype(float)
        x = np.stack([ylag, z], axis=2)
        meta = (RegressorMeta(name="ylag1", exogeneity="predetermined",
                              kind="lagged-outcome"),
                RegressorMeta(name="z"))
    data = PanelData(outcomes=y, regressors=x, regressor_meta=meta)
    truth = ParamState(beta=dgp.true_beta(family), alpha=alpha, gamma=gamma)
    return data, truth


def _gen_mnl(dgp, family, rng, alpha, gamma, gamma0, z, z0):
    N, T = dgp.n_units, dgp.n_periods
    d = family.index_dim
    slopes = dgp.true_beta(family).reshape(d, -1)

    def draw_cat(V):
        m = np.maximum(V.max(axis=1), 0.0)
        ex = np.exp(V - m[:, None])
        base = np.exp(-m)
        denom = base + ex.sum(axis=1)
        probs = np.concatenate([base[:, None], ex], axis=1) / denom[:, None]
        u = rng.random(V.shape[0])
        return 1 + (u[:, None] > probs.cumsum(axis=1)).sum(axis=1)

    if not dgp.dynamic:
        y = np.zeros((N, T), dtype=int)
        for t in range(T):
            V = slopes[:, 0][None, :] * z[:, t, None] + alpha + gamma[t]
            y[:, t] = draw_cat(V)
        x = z[:, :, None]
        meta = (RegressorMeta(name="z"),)
    else:
        # the lagged state enters through the indicator of the first non-base
        # category, giving genuine own-state persistence for category 2
        y = np.zeros((N, T), dtype=int)
        lag_ind = np.zeros((N, T))
        V0 = slopes[:, 1][None, :] * z0[:, None] + alpha + gamma0
        prev = draw_cat(V0)
        for t in range(T):
            lag_ind[:, t] = (prev == 2).astype(float)
            V = (slopes[:, 0][None, :] * lag_ind[:, t, None]
                 + slopes[:, 1][None, :] * z[:, t, None] + alpha + gamma[t])
            y[:, t] = draw_cat(V)
            prev = y[:, t]
        x = np.stack([lag_ind, z], axis=2)
        meta = (RegressorMeta(name="ylag1", exogeneity="predetermined",
                              kind="binary"),
                RegressorMeta(name="z"))
    data = PanelData(outcomes=y, regressors=x, regressor_meta=meta)
    truth = ParamState(beta=dgp.true_beta(family), alpha=alpha, gamma=gamma)
    return data, truth


def study_effects(dgp, family=None):
    """The partial effects tracked for a design."""
    family = family or dgp.make_family()
    out = []
    if family.kind in ("logit", "probit", "poisson"):
        if dgp.dynamic:
            out.append(eff.EffectSpec(regressor="ylag1", kind="binary"))
        out.append(eff.EffectSpec(regressor="z", kind="continuous"))
    elif family.kind == "ordered-logit":
        cats = (2, family.n_categories)
        for c in cats:
            if dgp.dynamic:
                out.append(eff.EffectSpec(regressor="ylag1", kind="continuous",
                                          category=c))
            out.append(eff.EffectSpec(regressor="z", kind="continuous", category=c))
    else:
        for c in range(2, family.n_categories + 1):
            if dgp.dynamic:
                out.append(eff.EffectSpec(regressor="ylag1", kind="binary",
                                          category=c))
            out.append(eff.EffectSpec(regressor="z", kind="continuous", category=c))
    return out


# ---------------------------------------------------------------------------
# estimator menu
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorSpec:
    label: str
    method: str                      # mle | penalty | prior | se-ac | oracle
    correction: corr.CorrectionSpec | None = None


def parse_estimator(label):
    """'uncorrected', 'oracle', 'se-ac', 'prior-GE1', 'penalty-SE', ..."""
    label = label.strip()
    if label in ("uncorrected", "mle"):
        return EstimatorSpec(label="uncorrected", method="mle")
    if label == "oracle":
        return EstimatorSpec(label="oracle", method="oracle")
    if label in ("se-ac", "prior-SE+AC"):
        return EstimatorSpec(label="se-ac", method="se-ac")
    for prefix, mode in (("prior-", "prior"), ("penalty-", "penalty")):
        if label.startswith(prefix):
            kind = label[len(prefix):]
            return EstimatorSpec(
                label=label, method=mode,
                correction=corr.CorrectionSpec(kind=kind, mode=mode),
            )
    raise ValidationError(f"cannot parse estimator label {label!r}")


@dataclass(frozen=True)
class StudySettings:
    iterations: int = 26_000
    burn_in: int = 6_000
    thinning: int = 10
    pilot_iterations: int = 5_000
    workers: int | None = None
    keep_raw: bool = False


# ---------------------------------------------------------------------------
# one replication
# ---------------------------------------------------------------------------


def _fit_prior_chain(data, family, spec, cfg, start, effects, population):
    fns = []
    for e in effects:
        e_r, _ = eff.resolve_effect(data, family, e)
        fns.append((e_r.label(),
                    (lambda er: lambda st: eff.ape(data, family, st, er,
                                                   population))(e_r)))
    out = mcmc.run_chain(data, family, spec, cfg, start_state=start,
                         functionals=fns, validate_spec=False)
    pm = mcmc.posterior_means(out)
    return out, pm


def run_replication(dgp, rep, menu, settings):
    """All estimators on one simulated panel; never raises on fit failures."""
    data, truth, true_apes = gen_panel(dgp, rep)
    family = dgp.make_family()
    effects = study_effects(dgp, family)
    population = data.n_units * data.n_periods
    record = {"rep": rep, "true_apes": true_apes, "estimators": {}}
    mle = None
    chain_cfg = mcmc.ChainConfig(
        iterations=settings.iterations, burn_in=settings.burn_in,
        thinning=settings.thinning, pilot_iterations=settings.pilot_iterations,
    )
    for slot, estimator in enumerate(menu):
        entry = {"ok": False}
        try:
            if estimator.method == "oracle":
                state, av = _one_step_oracle(data, family, truth)
                apes = eff.ape_report(data, family, state, effects, av=av,
                                      population_cells=population)
                entry.update(_pack_estimates(state.beta,
                                             np.sqrt(np.diag(av["vcov_beta"])),
                                             apes, headline="plug_in"))
            elif estimator.method == "mle":
                if mle is None:
                    mle = est.fit_mle(data, family)
                if not mle.converged:
                    raise ContractError("MLE did not converge")
                av = est.asymptotic_variance(mle.panel, family, mle.state)
                apes = eff.ape_report(mle.panel, family, mle.state, effects, av=av,
                                      population_cells=population)
                entry.update(_pack_estimates(mle.beta_hat, mle.se_beta, apes,
                                             headline="plug_in"))
                entry["dropped"] = (len(mle.dropped_units), len(mle.dropped_periods))
            elif estimator.method == "penalty":
                if mle is None:
                    mle = est.fit_mle(data, family)
                res = est.fit_penalized(data, family, estimator.correction,
                                        start=mle)
                if not res.converged:
                    raise ContractError("penalized fit did not converge")
                av = est.asymptotic_variance(res.panel, family, res.state)
                apes = eff.ape_report(res.panel, family, res.state, effects, av=av,
                                      population_cells=population)
                entry.update(_pack_estimates(res.beta_hat, res.se_beta, apes,
                                             headline="corrected"))
            elif estimator.method in ("prior", "se-ac"):
                if mle is None:
                    mle = est.fit_mle(data, family)
                sub = mle.panel
                spec = (estimator.correction if estimator.method == "prior"
                        else corr.CorrectionSpec(kind="SE", mode="prior"))
                cfg = replace(chain_cfg, seed=chain_seed(dgp, rep, slot))
                out, pm = _fit_prior_chain(sub, family, spec, cfg, mle.state,
                                           effects, population)
                state = pm["state"]
                if estimator.method == "se-ac":
                    state, _ = est.apply_addon_correction(sub, family, state)
                    beta_hat = state.beta
                else:
                    beta_hat = pm["beta_E"]
                se = np.sqrt(np.clip(np.diag(pm["beta_cov"]), 0, None))
                posterior = {
                    name: (draws.mean(), draws.var(ddof=1))
                    for name, draws in out.functionals.items()
                }
                apes_plug = eff.ape_report(sub, family, state, effects,
                                           population_cells=population)
                for a in apes_plug:
                    # posterior-draw variance is the inference route here
                    if a.label in posterior:
                        a.variance = posterior[a.label][1]
                apes_post = eff.ape_report(sub, family, state, effects,
                                           population_cells=population,
                                           posterior=posterior)
                entry.update(_pack_estimates(beta_hat, se, apes_plug,
                                             headline="corrected"))
                entry["ape_posterior"] = {a.label: a.to_dict() for a in apes_post}
                entry["acceptance_overall"] = out.accept_overall
            else:  # pragma: no cover
                raise ContractError(f"unknown method {estimator.method}")
            entry["ok"] = True
        except Exception as exc:  # replication failures are logged, not fatal
            entry["error"] = f"{type(exc).__name__}: {exc}"
        record["estimators"][estimator.label] = entry
    return record


def _pack_estimates(beta, se, apes, headline):
    return {
        "beta": np.asarray(beta, dtype=float).tolist(),
        "se_beta": None if se is None else np.asarray(se, dtype=float).tolist(),
        "apes": {a.label: a.to_dict() for a in apes},
        "headline": headline,
    }


# ---------------------------------------------------------------------------
# the study driver and metrics table
# ---------------------------------------------------------------------------


@dataclass
class MetricsTable:
    """Bias / SD / (SE over SD) / coverage rows per quantity and estimator."""

    design: dict
    rows: list = field(default_factory=list)
    raw: list | None = None

    def add_row(self, quantity, estimator, bias_pct, sd, se_sd, coverage, n_eff):
        self.rows.append({
            "quantity": quantity, "estimator": estimator,
            "bias_pct": bias_pct, "sd": sd, "se_sd": se_sd,
            "coverage_95": coverage, "n_effective": n_eff,
        })

    def lookup(self, quantity, estimator):
        for row in self.rows:
            if row["quantity"] == quantity and row["estimator"] == estimator:
                return row
        raise KeyError((quantity, estimator))


def run_study(dgp, menu, settings=StudySettings()):
    """Run the full replication study and aggregate the metrics table."""
    if isinstance(menu, (list, tuple)) and menu and isinstance(menu[0], str):
        menu = [parse_estimator(m) for m in menu]
    menu = list(menu)
    reps = range(dgp.replications)
    if settings.workers and settings.workers > 1 and dgp.replications > 1:
        with ProcessPoolExecutor(max_workers=settings.workers) as pool:
            records = list(pool.map(run_replication, [dgp] * dgp.replications,
                                    reps, [menu] * dgp.replications,
                                    [settings] * dgp.replications, chunksize=1))
    else:
        records = [run_replication(dgp, r, menu, settings) for r in reps]
    return aggregate(dgp, menu, records, keep_raw=settings.keep_raw)


def archive_records(records, path):
    """Per-replication raw results as JSON lines (one replication per line)."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")


def aggregate(dgp, menu, records, keep_raw=False):
    family = dgp.make_family()
    beta_true = dgp.true_beta(family)
    labels = family.beta_labels(
        ("ylag1", "z") if dgp.dynamic else ("z",)
    )
    table = MetricsTable(design={
        "family": dgp.family, "dynamic": dgp.dynamic, "N": dgp.n_units,
        "T": dgp.n_periods, "replications": dgp.replications,
        "base_seed": dgp.base_seed,
    })
    for estimator in menu:
        oks = [r for r in records
               if r["estimators"].get(estimator.label, {}).get("ok")]
        n_eff = len(oks)
        if n_eff == 0:
            for j, lab in enumerate(labels):
                table.add_row(f"beta:{lab}", estimator.label, np.nan, np.nan,
                              np.nan, np.nan, 0)
            continue
        betas = np.array([r["estimators"][estimator.label]["beta"] for r in oks])
        ses = np.array([r["estimators"][estimator.label]["se_beta"] for r in oks])
        for j, lab in enumerate(labels):
            bias = 100.0 * (betas[:, j].mean() - beta_true[j]) / abs(beta_true[j])
            sd = betas[:, j].std(ddof=1) if n_eff > 1 else np.nan
            se_sd = ses[:, j].mean() / sd if n_eff > 1 and sd > 0 else np.nan
            cover = float(np.mean(
                np.abs(betas[:, j] - beta_true[j]) <= 1.96 * ses[:, j]
            ))
            table.add_row(f"beta:{lab}", estimator.label, bias, sd, se_sd,
                          cover, n_eff)
        ape_labels = list(oks[0]["estimators"][estimator.label]["apes"])
        for al in ape_labels:
            ests, sds, truths = [], [], []
            field_name = ("corrected"
                          if oks[0]["estimators"][estimator.label]["headline"]
                          == "corrected" else "plug_in")
            for r in oks:
                a = r["estimators"][estimator.label]["apes"][al]
                ests.append(a[field_name])
                sds.append(a["se"])
                truths.append(r["true_apes"][al])
            ests = np.asarray(ests)
            sds = np.asarray(sds)
            truths = np.asarray(truths)
            denom = abs(truths.mean()) if abs(truths.mean()) > 1e-12 else 1.0
            bias = 100.0 * (ests - truths).mean() / denom
            sd = ests.std(ddof=1) if n_eff > 1 else np.nan
            se_sd = sds.mean() / sd if n_eff > 1 and sd > 0 else np.nan
            cover = float(np.mean(np.abs(ests - truths) <= 1.96 * sds))
            table.add_row(f"ape:{al}", estimator.label, bias, sd, se_sd,
                          cover, n_eff)
    if keep_raw:
        table.raw = records
    return table


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

_COLUMNS = ("quantity", "estimator", "bias_pct", "sd", "se_sd", "coverage_95",
            "n_effective")


def _fmt_cell(key, value):
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return ""
    if key == "bias_pct":
        return f"{value:.1f}"
    if key in ("sd", "se_sd", "coverage_95"):
        return f"{value:.2f}"
    return str(value)


def _one_step_oracle(data, family, truth):
    """One Newton step from the true parameters with analytical SEs.

    Centered CIs from this estimator are the coverage-calibration benchmark:
    the step is first-order unbiased with variance W_raw^{-1}.
    """
    from .likelihood import concentrate_phi, joint_derivatives
    state = concentrate_phi(data, family, truth, tol=1e-11)
    av = est.asymptotic_variance(data, family, state)
    jd = joint_derivatives(data, family, state)
    c = jd.scale
    gphi = np.concatenate([np.ravel(jd.score_alpha), np.ravel(jd.score_gamma)]) / c
    g_conc = jd.score_beta / c + av["A_bphi_raw"] @ jd.H.solve(gphi)
    beta = truth.beta + np.linalg.solve(av["W_raw"], g_conc)
    return replace(state, beta=beta), av


def _rounded_rows(rows):
    """Rows at the table's fixed decimal precision, shared by every format."""
    out = []
    for row in rows:
        r = dict(row)
        for key, nd in (("bias_pct", 1), ("sd", 2), ("se_sd", 2),
                        ("coverage_95", 2)):
            v = r.get(key)
            r[key] = None if v is None or not np.isfinite(v) else round(float(v), nd)
        out.append(r)
    return out


def emit_table(metrics, fmt="csv"):
    """Render the metrics table as csv, json, or markdown text.

    All formats carry the same fixed-decimal values (1 decimal for bias in
    percent, 2 for SD, SE/SD, and coverage), so format round-trips preserve
    every emitted value.
    """
    if fmt not in ("csv", "json", "markdown"):
        raise ContractError(f"unknown table format {fmt!r}")
    rows = _rounded_rows(metrics.rows)
    if fmt == "json":
        payload = {"design": metrics.design, "rows": rows}
        return json.dumps(payload, sort_keys=True, default=_json_default,
                          indent=2) + "\n"
    if fmt == "csv":
        lines = [",".join(_COLUMNS)]
        for row in rows:
            lines.append(",".join(_fmt_cell(c, row[c]) for c in _COLUMNS))
        return "\n".join(lines) + "\n"
    header = "| Quantity | Estimator | Bias | SD | SE/SD | p̂.95 |"
    sep = "|---|---|---|---|---|---|"
    lines = [header, sep]
    for row in rows:
        lines.append(
            "| " + " | ".join([
                row["quantity"], row["estimator"],
                _fmt_cell("bias_pct", row["bias_pct"]),
                _fmt_cell("sd", row["sd"]),
                _fmt_cell("se_sd", row["se_sd"]),
                _fmt_cell("coverage_95", row["coverage_95"]),
            ]) + " |"
        )
    return "\n".join(lines) + "\n"


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def table_from_json(text):
    payload = json.loads(text)
    t = MetricsTable(design=payload["design"])
    t.rows = payload["rows"]
    return t


def table_from_csv(text):
    lines = [l for l in text.strip().split("\n")]
    header = lines[0].split(",")
    t = MetricsTable(design={})
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for key, cell in zip(header, cells):
            if key in ("quantity", "estimator"):
                row[key] = cell
            elif key == "n_effective":
                row[key] = int(cell) if cell else 0
            else:
                row[key] = float(cell) if cell else np.nan
        t.rows.append(row)
    return t


# ---------------------------------------------------------------------------
# presets mirroring the simulation designs
# ---------------------------------------------------------------------------

PRESETS = {
    "table2-static-ordered-logit": (
        DgpSpec(family="ordered-logit", dynamic=False),
        ("uncorrected", "prior-GE1", "penalty-GE1"),
    ),
    "table2-dynamic-ordered-logit": (
        DgpSpec(family="ordered-logit", dynamic=True),
        ("uncorrected", "prior-GE1", "penalty-GE1"),
    ),
    "table3-static-logit": (
        DgpSpec(family="logit", dynamic=False),
        ("uncorrected", "prior-SE", "penalty-SE"),
    ),
    "table3-dynamic-logit": (
        DgpSpec(family="logit", dynamic=True),
        ("uncorrected", "prior-PE", "penalty-PE", "se-ac"),
    ),
    "table4-static-multinomial-logit": (
        DgpSpec(family="multinomial-logit", dynamic=False),
        ("uncorrected", "prior-SML", "penalty-SML"),
    ),
    "table4-dynamic-multinomial-logit": (
        DgpSpec(family="multinomial-logit", dynamic=True),
        ("uncorrected", "prior-PML", "penalty-PML"),
    ),
    "table5-static-probit": (
        DgpSpec(family="probit", dynamic=False),
        ("uncorrected", "prior-GE1", "penalty-GE1"),
    ),
    "table5-dynamic-probit": (
        DgpSpec(family="probit", dynamic=True),
        ("uncorrected", "prior-GE1", "penalty-GE1"),
    ),
}


def preset(name, n_periods=None, replications=None, base_seed=None):
    if name not in PRESETS:
        raise ValidationError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}"
        )
    dgp, menu = PRESETS[name]
    if n_periods is not None:
        dgp = replace(dgp, n_periods=n_periods)
    if replications is not None:
        dgp = replace(dgp, replications=replications)
    if base_seed is not None:
        dgp = replace(dgp, base_seed=base_seed)
    return dgp, menu
