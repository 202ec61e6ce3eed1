"""Command-line entry points over CSV panel data.

Commands: estimate, simulate, mcmc, diagnose, ape.  Every run is a pure
function of its input files, flags, and seed; outputs carry the merged
effective configuration for provenance and contain no timestamps, so reruns
are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import corrections as corr
from . import effects as eff
from . import estimation as est
from . import mcmc
from . import montecarlo as mc
from .errors import (ContractError, DegeneratePanelError, DomainError,
                     DumpFormatError, LinearAlgebraError, ParseError,
                     ValidationError)
from .families import ModelFamily
from .panel import read_panel_csv

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--format", choices=("csv", "json", "markdown"),
                        default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output directory")
    p = argparse.ArgumentParser(prog="twfepanel", parents=[common],
                                description="Two-way fixed-effects panel "
                                            "estimation with bias reduction")
    p.set_defaults(seed=0, threads=None, format="csv", out=".")
    sub = p.add_subparsers(dest="command", required=True,
                           parser_class=lambda **kw: argparse.ArgumentParser(
                               parents=[common], **kw))

    def add_model_args(sp):
        sp.add_argument("--data", required=True, help="long-format panel CSV")
        sp.add_argument("--model", help="model config JSON (family, regressors)")
        sp.add_argument("--family", choices=("logit", "probit", "poisson",
                                             "ordered-logit", "multinomial-logit",
                                             "gaussian-ar"))
        sp.add_argument("--categories", type=int, default=None)
        sp.add_argument("--tau1", type=float, default=None)
        sp.add_argument("--lags", type=int, default=None)
        sp.add_argument("--correction",
                        choices=("auto",) + corr.KINDS, default="auto")
        sp.add_argument("--mode", choices=("prior", "penalty"), default=None)
        sp.add_argument("--L", type=int, default=None, help="trim lag")
        sp.add_argument("--expectation", choices=corr.EXPECTATION_MODES,
                        default="mixed")

    sp = sub.add_parser("estimate", help="fit one panel, report coefficients and APEs")
    add_model_args(sp)
    sp.add_argument("--mcmc", action="store_true",
                    help="posterior means by MCMC (prior mode)")
    _add_chain_args(sp)

    sp = sub.add_parser("mcmc", help="run the posterior chain and dump draws")
    add_model_args(sp)
    _add_chain_args(sp)

    sp = sub.add_parser("simulate", help="replication study of a preset design")
    sp.add_argument("--preset", required=True, choices=sorted(mc.PRESETS))
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--T", type=int, default=None)
    sp.add_argument("--estimators", default=None,
                    help="comma-separated estimator labels overriding the preset")
    sp.add_argument("--archive", action="store_true",
                    help="also write per-replication raw results (JSON lines)")
    _add_chain_args(sp)

    sp = sub.add_parser("diagnose", help="diagnostics over a chain dump")
    sp.add_argument("--chain", required=True)

    sp = sub.add_parser("ape", help="average partial effects at fitted parameters")
    add_model_args(sp)
    sp.add_argument("--params", help="FitResult JSON to evaluate at (else refit)")
    sp.add_argument("--effect", action="append", default=None,
                    help="regressor[:category] (repeatable)")
    return p


def _add_chain_args(sp):
    sp.add_argument("--iters", type=int, default=26_000)
    sp.add_argument("--burnin", type=int, default=6_000)
    sp.add_argument("--thin", type=int, default=10)
    sp.add_argument("--pilot", type=int, default=5_000)


def _effective_config(args):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return cfg


def _resolve_model(args, data):
    """Merged model configuration: JSON file first, flags override."""
    model_cfg = {}
    if args.model:
        with open(args.model) as fh:
            model_cfg = json.load(fh)
    fam_kind = args.family or model_cfg.get("family")
    if fam_kind is None:
        raise ValidationError("a family is required (--family or model JSON)")
    kwargs = {}
    J = args.categories or model_cfg.get("n_categories")
    if J:
        kwargs["n_categories"] = int(J)
    tau1 = args.tau1 if args.tau1 is not None else model_cfg.get("tau1")
    if tau1 is not None:
        kwargs["tau1"] = float(tau1)
    lags = args.lags or model_cfg.get("n_lags")
    if lags:
        kwargs["n_lags"] = int(lags)
    family = ModelFamily(kind=fam_kind, **kwargs)
    meta = model_cfg.get("regressors")
    if meta is not None:
        data = read_panel_csv(args.data, meta)
    return family, data, model_cfg


def _resolve_spec(args, family, data):
    if args.correction == "auto":
        spec = corr.default_correction(family, data,
                                       mode=args.mode or "penalty")
    else:
        spec = corr.CorrectionSpec(kind=args.correction,
                                   mode=args.mode or "penalty",
                                   trim_lag=args.L, expectation=args.expectation)
    if args.L is not None or args.expectation != "mixed":
        spec = corr.CorrectionSpec(kind=spec.kind, mode=spec.mode,
                                   trim_lag=args.L, expectation=args.expectation)
    spec.validate_for(family, data)
    return spec


def _is_dynamic_binary(data, family):
    return family.kind in ("logit", "probit") and any(
        m.kind == "lagged-outcome" for m in data.regressor_meta
    )


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _ape_section(panel, family, state, data, av=None, posterior=None):
    effects = eff.default_effects(panel, family)
    population = data.n_units * data.n_periods
    rows = eff.ape_report(panel, family, state, effects, av=av,
                          population_cells=population, posterior=posterior)
    if posterior is not None:
        for r in rows:
            if r.kind != "posterior-mean" and r.label in posterior:
                r.variance = posterior[r.label][1]
    if _is_dynamic_binary(data, family):
        lag = next(m.name for m in data.regressor_meta
                   if m.kind == "lagged-outcome")
        extra = [
            eff.EffectSpec(regressor=lag, kind="binary"),
            eff.EffectSpec(regressor=lag, kind="long-run"),
        ]
        markov = eff.ape_report(panel, family, state, extra, av=av,
                                population_cells=population)
        markov[0].label = "markov:transition-gap"
        markov[1].label = "markov:long-run-participation"
        rows += markov
    return rows


def cmd_estimate(args):
    data = read_panel_csv(args.data)
    family, data, model_cfg = _resolve_model(args, data)
    use_mcmc = getattr(args, "mcmc", False) or args.command == "mcmc"
    if use_mcmc and args.mode is None:
        args.mode = "prior"
    spec = None
    if args.correction != "Flat" or use_mcmc:
        spec = _resolve_spec(args, family, data)
    if use_mcmc and spec.mode != "prior":
        raise ValidationError("MCMC estimation samples prior-mode corrections; "
                              "pass --mode prior")
    os.makedirs(args.out, exist_ok=True)
    config = _effective_config(args)
    mle = est.fit_mle(data, family)
    report_lines = [
        f"family: {family.kind}   N={data.n_units} T={data.n_periods}",
        f"dropped stayers: units={len(mle.dropped_units)} "
        f"periods={len(mle.dropped_periods)}",
    ]
    payload = {"config": config, "model": model_cfg,
               "dropped_units": [str(u) for u in mle.dropped_units],
               "dropped_periods": [str(p) for p in mle.dropped_periods]}
    if use_mcmc:
        effects = eff.default_effects(mle.panel, family)
        population = data.n_units * data.n_periods
        fns = []
        for e in effects:
            e_r, _ = eff.resolve_effect(mle.panel, family, e)
            fns.append((e_r.label(),
                        (lambda er: lambda st: eff.ape(mle.panel, family, st, er,
                                                       population))(e_r)))
        cfg = mcmc.ChainConfig(iterations=args.iters, burn_in=args.burnin,
                               thinning=args.thin, pilot_iterations=args.pilot,
                               seed=args.seed)
        out = mcmc.run_chain(mle.panel, family, spec, cfg, start_state=mle.state,
                             functionals=fns)
        pm = mcmc.posterior_means(out)
        state = pm["state"]
        se = np.sqrt(np.clip(np.diag(pm["beta_cov"]), 0, None))
        posterior = {name: (d.mean(), d.var(ddof=1))
                     for name, d in out.functionals.items()}
        apes = _ape_section(mle.panel, family, state, data, posterior=posterior)
        gew = {}
        for j, name in enumerate(out.param_names[:len(mle.beta_labels)]):
            g = mcmc.geweke(out, coordinate=j)
            gew[name] = {"acceptance": float(out.acceptance[j]),
                         "average_p": g["average_p"],
                         "smallest_p": g["smallest_p"]}
        mcmc.dump_chain(out, os.path.join(args.out, "chain.bin"))
        payload.update({
            "method": "posterior-mean",
            "correction": json.loads(spec.to_json()),
            "beta_labels": list(mle.beta_labels),
            "beta_hat": state.beta.tolist(),
            "se_beta": se.tolist(),
            "acceptance_overall": out.accept_overall,
            "geweke": gew,
            "apes": [a.to_dict() for a in apes],
        })
        report_lines.append(f"posterior means under prior {spec.kind} "
                            f"({args.iters}/{args.burnin}/{args.thin})")
        _emit_geweke_table(gew, os.path.join(args.out, "geweke.csv"))
        beta_hat, se_beta, labels = state.beta, se, mle.beta_labels
    else:
        if spec is None or spec.kind == "Flat":
            res = mle
        else:
            res = est.fit_penalized(data, family, spec, start=mle)
        av = est.asymptotic_variance(res.panel, family, res.state)
        apes = _ape_section(res.panel, family, res.state, data, av=av)
        payload.update({
            "method": res.method,
            "correction": None if spec is None else json.loads(spec.to_json()),
            "beta_labels": list(res.beta_labels),
            "beta_hat": res.beta_hat.tolist(),
            "se_beta": res.se_beta.tolist(),
            "converged": bool(res.converged),
            "gradient_norm": res.gradient_norm,
            "apes": [a.to_dict() for a in apes],
        })
        report_lines.append(f"estimator: {payload['method']}"
                            + (f" + {spec.kind} ({spec.mode})" if spec else ""))
        beta_hat, se_beta, labels = res.beta_hat, res.se_beta, res.beta_labels
    report_lines.append("")
    report_lines.append(f"{'coefficient':<16}{'estimate':>12}{'se':>12}")
    for lab, b, s in zip(labels, beta_hat, se_beta):
        report_lines.append(f"{lab:<16}{b:>12.6f}{s:>12.6f}")
    report_lines.append("")
    report_lines.append(f"{'effect':<34}{'plug-in':>12}{'bias-term':>12}"
                        f"{'corrected':>12}{'se':>12}")
    for a in apes:
        report_lines.append(
            f"{a.label:<34}{a.plug_in:>12.6f}{a.bias_term:>12.6f}"
            f"{a.corrected:>12.6f}{a.se:>12.6f}"
        )
    _write(os.path.join(args.out, "fit.json"),
           json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _write(os.path.join(args.out, "report.txt"), "\n".join(report_lines) + "\n")
    return EXIT_OK


def _emit_geweke_table(gew, path):
    lines = ["coefficient,acceptance,average_p,smallest_p"]
    for name, row in gew.items():
        lines.append(f"{name},{row['acceptance']:.4f},{row['average_p']:.4f},"
                     f"{row['smallest_p']:.4f}")
    _write(path, "\n".join(lines) + "\n")


def cmd_simulate(args):
    dgp, default_menu = mc.preset(args.preset, n_periods=args.T,
                                  replications=args.reps, base_seed=args.seed)
    menu = (args.estimators.split(",") if args.estimators else default_menu)
    settings = mc.StudySettings(iterations=args.iters, burn_in=args.burnin,
                                thinning=args.thin, pilot_iterations=args.pilot,
                                workers=args.threads)
    os.makedirs(args.out, exist_ok=True)
    total = dgp.replications
    menu_specs = [mc.parse_estimator(m) for m in menu]
    records = []
    if settings.workers and settings.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=settings.workers) as pool:
            futures = pool.map(mc.run_replication, [dgp] * total, range(total),
                               [menu_specs] * total, [settings] * total,
                               chunksize=1)
            for rep, rec in enumerate(futures):
                records.append(rec)
                print(f"replication {rep + 1}/{total} done", file=sys.stderr)
    else:
        for rep in range(total):
            records.append(mc.run_replication(dgp, rep, menu_specs, settings))
            print(f"replication {rep + 1}/{total} done", file=sys.stderr)
    table = mc.aggregate(dgp, menu_specs, records)
    if getattr(args, "archive", False):
        mc.archive_records(records, os.path.join(args.out, "replications.jsonl"))
    ext = {"csv": "csv", "json": "json", "markdown": "md"}[args.format]
    _write(os.path.join(args.out, f"metrics.{ext}"),
           mc.emit_table(table, args.format))
    config = _effective_config(args)
    _write(os.path.join(args.out, "config.json"),
           json.dumps({"config": config, "design": table.design},
                      sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_diagnose(args):
    out = mcmc.load_chain(args.chain)
    if np.asarray(out.draws).shape[0] < 200:
        raise ContractError("diagnosis requires at least 200 retained draws")
    os.makedirs(args.out, exist_ok=True)
    nb = out.layout_info.get("n_beta", min(8, len(out.param_names)))
    gew = {}
    for j in range(nb):
        g = mcmc.geweke(out, coordinate=j)
        gew[out.param_names[j]] = {
            "acceptance": float(out.acceptance[j]),
            "average_p": g["average_p"], "smallest_p": g["smallest_p"],
        }
    _emit_geweke_table(gew, os.path.join(args.out, "geweke.csv"))
    mcmc.export_trace_csv(out, os.path.join(args.out, "trace.csv"), max_coords=nb)
    mcmc.export_acf_csv(out, os.path.join(args.out, "acf.csv"), max_coords=nb)
    lines = ["coordinate,acceptance"]
    for name, rate in zip(out.param_names, out.acceptance):
        lines.append(f"{name},{rate:.4f}")
    _write(os.path.join(args.out, "acceptance.csv"), "\n".join(lines) + "\n")
    print(json.dumps({"coefficients": gew, "prior_failures": out.prior_failures},
                     sort_keys=True, indent=2))
    return EXIT_OK


def cmd_ape(args):
    data = read_panel_csv(args.data)
    family, data, model_cfg = _resolve_model(args, data)
    if args.params:
        with open(args.params) as fh:
            fitted = json.load(fh)
        from .likelihood import ParamState
        beta = np.asarray(fitted["beta_hat"], dtype=float)
        alpha = np.asarray(fitted["alpha_hat"], dtype=float)
        gamma = np.asarray(fitted["gamma_hat"], dtype=float)
        state = ParamState(beta=beta, alpha=alpha, gamma=gamma)
        from .panel import drop_stayers
        panel = drop_stayers(data, family).panel
    else:
        res = est.fit_mle(data, family)
        state, panel = res.state, res.panel
    if args.effect:
        effects = []
        for spec_str in args.effect:
            parts = spec_str.split(":")
            cat = None
            kind = None
            for extra in parts[1:]:
                if extra.startswith("cat"):
                    cat = int(extra[3:])
                else:
                    kind = extra
            effects.append(eff.EffectSpec(regressor=parts[0], kind=kind,
                                          category=cat))
    else:
        effects = eff.default_effects(panel, family)
    av = est.asymptotic_variance(panel, family, state)
    rows = eff.ape_report(panel, family, state, effects, av=av,
                          population_cells=data.n_units * data.n_periods)
    os.makedirs(args.out, exist_ok=True)
    payload = {"config": _effective_config(args),
               "apes": [a.to_dict() for a in rows]}
    _write(os.path.join(args.out, "apes.json"),
           json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(json.dumps(payload["apes"], sort_keys=True, indent=2))
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command in ("estimate", "mcmc"):
            return cmd_estimate(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "diagnose":
            return cmd_diagnose(args)
        if args.command == "ape":
            return cmd_ape(args)
        parser.error(f"unknown command {args.command}")
    except (ValidationError, ContractError, DomainError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (LinearAlgebraError, DegeneratePanelError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ParseError, DumpFormatError, OSError) as exc:
        detail = ""
        if isinstance(exc, ParseError) and exc.row is not None:
            detail = f" (row {exc.row}" + (f", column {exc.column}" if exc.column else "") + ")"
        if isinstance(exc, DumpFormatError) and exc.offset is not None:
            detail = f" (byte offset {exc.offset})"
        print(f"i/o error: {exc}{detail}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
