"""Command-line front end: ``simulate``, ``estimate`` and ``welfare``.

Exit codes: 0 success, 2 invalid configuration or data, 3 numerical failure,
4 weak identification of the persuasion parameter with ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .config import ConfigError, RunConfig, as_plain, load_config, parse_config
from .exceptions import InputError, NumericError, ParameterError, SolverError, WeakIdentificationWarning
from .gmm import estimate_stage1, estimate_theta, identification_diagnostics
from .infotheory import signal_marginal_entropy
from .inversion import PseudoShocks, apply_share_floor, pseudo_shocks
from .io import (
    read_markets_csv, read_table, reject_zero_inside_shares, write_manifest, write_markets_csv, write_table,
    write_truth_csv,
)
from .model import Belief, ChoiceSpec, MarketPanel, PreferenceParams
from .simulate import simulate_markets
from .welfare import welfare_distribution

log = logging.getLogger("ripersuasion")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_WEAK = 0, 2, 3, 4
BOOTSTRAP_LABEL = "bootstrap (resampling markets in both stages); not an asymptotic result of the model"


class _Timer:
    def __init__(self):
        self.t = {}

    def __call__(self, name):
        timer = self

        class _C:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                timer.t[name] = time.perf_counter() - self.start

        return _C()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ripersuasion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML run configuration (or a manifest.json to replay)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the configured root seed")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes (outputs do not depend on it)")
        sp.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("simulate", help="simulate markets from the configured DGP")
    common(s)
    e = sub.add_parser("estimate", help="two-step GMM estimation from a market CSV")
    common(e)
    e.add_argument("--data", type=Path, required=True, help="market CSV")
    e.add_argument("--weight", choices=("identity", "efficient"), default=None)
    e.add_argument("--bootstrap", type=int, default=None, metavar="R", help="bootstrap draws for theta standard errors")
    e.add_argument("--strict", action="store_true", help="exit 4 if theta is weakly identified")
    w = sub.add_parser("welfare", help="first-best achievement distributions from an estimate directory")
    common(w)
    w.add_argument("--data", type=Path, required=True, help="directory written by 'estimate'")
    w.add_argument("--strict", action="store_true")
    return p


def _load(args, panel: MarketPanel | None = None) -> RunConfig:
    if args.config is not None:
        return load_config(args.config, args.seed)
    if panel is None:
        raise ConfigError("--config: required for this command")
    tree = {"model": {"J": panel.J, "K": panel.K, "L": int(panel.level.max()) + 1}}
    return parse_config(tree, args.seed)


# --------------------------------------------------------------------------- simulate


def cmd_simulate(args, argv) -> int:
    timer = _Timer()
    cfg = _load(args)
    spec = cfg.dgp_spec()
    with timer("simulate"):
        data = simulate_markets(spec, jobs=args.jobs)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    signals = spec.strategy.signals if spec.strategy is not None else ("+", "-")
    with timer("write"):
        write_markets_csv(out / "markets.csv", data.panel)
        write_truth_csv(out / "truth.csv", data.panel, data.truth, signals)
        _write_params(out / "true_params.csv", data.truth.params, cfg.choice)
    write_manifest(out, "simulate", cfg, cfg.seed, argv, timer.t, [out / "markets.csv", out / "truth.csv", out / "true_params.csv"])
    print(f"simulated M={spec.M} markets ({spec.n_markets} without persuasion, {spec.n_persuasion} with), seed={cfg.seed}")
    print(f"wrote {out / 'markets.csv'} and {out / 'truth.csv'}")
    return EXIT_OK


def _write_params(path, params: PreferenceParams, choice: ChoiceSpec, se_alpha=None, se_p0=None):
    J, K, L = params.shape
    rows = []
    for k in range(K):
        for l in range(L):
            for j in range(J):
                row = [choice.option_labels[j], k + 1, l + 1, j + 1, float(params.alpha[j, k, l]), float(params.p0[j, k, l])]
                if se_alpha is not None:
                    row += [float(se_alpha[j, k, l]) if j < J - 1 else 0.0, float(se_p0[j, k, l])]
                rows.append(row)
    header = ["option", "group", "level", "j", "alpha", "p0"] + (["alpha_se", "p0_se"] if se_alpha is not None else [])
    write_table(path, header, rows)


# --------------------------------------------------------------------------- estimate


def _data_shares(panel: MarketPanel, L: int) -> np.ndarray:
    """Least-squares fit of shares on demographic weights per level: the data analogue of p0."""
    J, K = panel.J, panel.K
    out = np.full((J, K, L), np.nan)
    for l in range(L):
        sel = panel.level == l
        if sel.sum() >= K:
            coef, *_ = np.linalg.lstsq(panel.demo[sel], panel.shares[sel], rcond=None)
            out[:, :, l] = coef.T
    return out


def _bootstrap_draw(panel0, panel1, L, stage1_opts, strategy, theta_opts, seed, tol, thresholds):
    rng = np.random.default_rng(seed)
    b0 = panel0.subset(rng.integers(0, len(panel0), len(panel0)))
    b1 = panel1.subset(rng.integers(0, len(panel1), len(panel1)))
    est = estimate_stage1(b0, L, replace(stage1_opts, n_starts=1, compute_covariance=False, seed=seed))
    ps = pseudo_shocks(b0, est.params, tol, thresholds)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WeakIdentificationWarning)
        return estimate_theta(b1, ps, strategy, est.params, theta_opts).theta


def _bootstrap_worker(*args):
    # worker processes do not inherit the parent's logging setup
    log.setLevel(logging.ERROR)
    return _bootstrap_draw(*args)


def cmd_estimate(args, argv) -> int:
    timer = _Timer()
    cfg0 = load_config(args.config, args.seed) if args.config is not None else None
    choice = cfg0.choice if cfg0 else None
    panel = read_markets_csv(args.data, *( (choice.J, choice.K, choice.L) if choice else (None, None, None) ))
    cfg = cfg0 or _load(args, panel)
    est_cfg = cfg.estimation
    if args.weight is not None:
        est_cfg = replace(est_cfg, weight=args.weight)
    if args.bootstrap is not None:
        if args.bootstrap < 0:
            raise ConfigError("--bootstrap: must be >= 0")
        est_cfg = replace(est_cfg, bootstrap=args.bootstrap)
    L = cfg.choice.L
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    outputs = []

    pan0 = panel.subset(panel.chi == 0)
    pan1 = panel.subset(panel.chi == 1) if np.any(panel.chi == 1) else None
    if len(pan0.ids) == 0:
        raise InputError("estimation needs at least one market with chi=0")
    if est_cfg.share_floor is not None:
        pan0 = apply_share_floor(pan0, est_cfg.share_floor)
    else:
        reject_zero_inside_shares(pan0)

    diag = identification_diagnostics(pan0, L, est_cfg.instruments)
    if not diag.ok:
        raise InputError(
            "identification diagnostics failed (condition number > "
            f"{diag.threshold:.0e}): " + ", ".join(f"{b} instruments at level {l + 1}: {c:.3g}" for b, l, c in diag.flagged)
        )

    with timer("stage1"):
        est = estimate_stage1(pan0, L, est_cfg.stage1_options(cfg.seed))
    _write_params(out / "stage1_estimates.csv", est.params, cfg.choice, _pad_alpha(est.alpha_se()), est.p0_se())
    J, K = cfg.choice.J, cfg.choice.K
    p0_rows = [[k + 1, l + 1] + [float(x) for x in est.params.p0[:, k, l]] for k in range(K) for l in range(L)]
    write_table(out / "p0_table.csv", ["group", "level"] + [f"p0_{j + 1}" for j in range(J)], p0_rows)
    outputs += [out / "stage1_estimates.csv", out / "p0_table.csv"]

    with timer("pseudo_shocks"):
        ps = pseudo_shocks(pan0, est.params, est_cfg.inversion_tol, est_cfg.thresholds)
    write_table(
        out / "pseudo_shocks.csv", ["market_id", "x_level"] + [f"eps_{j + 1}" for j in range(J)],
        [[mid, int(l) + 1] + [float(x) for x in e] for mid, l, e in zip(ps.ids, ps.levels, ps.shocks)],
    )
    outputs.append(out / "pseudo_shocks.csv")
    summary = {
        "stage1": {
            "objective": est.objective, "converged": est.converged, "weight_matrix": est.weight_matrix,
            "names": est.names, "alpha": est.params.alpha, "p0": est.params.p0, "covariance": est.covariance,
            "n_markets": est.n_markets, "identification": {"share_condition": diag.share_condition, "shock_condition": diag.shock_condition},
        },
        "theta": None,
        "persuasion": None,
    }
    print(f"stage 1: {len(pan0.ids)} markets, objective {est.objective:.6g}, weight {est.weight_matrix}")

    weak = False
    if pan1 is None:
        print("no markets with chi=1: stage 2 skipped")
    elif cfg.persuasion is None:
        print("markets with chi=1 present but no persuasion section in the configuration: stage 2 skipped")
    else:
        pc = cfg.persuasion
        strategy = pc.strategy()
        topts = pc.theta_options(cfg.solver)
        with timer("stage2"), warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", WeakIdentificationWarning)
            th = estimate_theta(pan1, ps, strategy, est.params, topts)
        for wmsg in caught:
            print(f"warning: {wmsg.message}", file=sys.stderr)
        weak = th.weak_identification
        boot = None
        if est_cfg.bootstrap > 0:
            seeds = np.random.SeedSequence(cfg.seed).spawn(est_cfg.bootstrap)
            draws_seed = [int(s.generate_state(1)[0]) for s in seeds]
            with timer("bootstrap"):
                args_ = (pan0, pan1, L, est_cfg.stage1_options(cfg.seed), strategy, topts)
                if args.jobs == 1:
                    draws = [_bootstrap_draw(*args_, s, est_cfg.inversion_tol, est_cfg.thresholds) for s in draws_seed]
                else:
                    draws = Parallel(n_jobs=args.jobs)(
                        delayed(_bootstrap_worker)(*args_, s, est_cfg.inversion_tol, est_cfg.thresholds) for s in draws_seed
                    )
            boot = np.array(draws)
            th.bootstrap_draws = boot
        rows = []
        for i, t in enumerate(th.theta):
            row = [f"theta_{i + 1}", float(t), th.objective, int(weak)]
            row += list(th.plateau) if th.plateau else ["", ""]
            row += [float(th.bootstrap_se[i]) if boot is not None else "", BOOTSTRAP_LABEL if boot is not None else ""]
            rows.append(row)
        write_table(
            out / "theta.csv",
            ["parameter", "estimate", "objective", "weak_identification", "plateau_lo", "plateau_hi", "bootstrap_se", "bootstrap_note"],
            rows,
        )
        grid = np.atleast_2d(th.grid.T).T if th.grid.ndim == 1 else th.grid
        prof_rows = [list(map(float, np.atleast_1d(g))) + [float(v), float(th.profile_se[i]) if th.profile_se is not None else ""] for i, (g, v) in enumerate(zip(grid, th.profile))]
        write_table(out / "theta_profile.csv", [f"theta_{i + 1}" for i in range(grid.shape[1])] + ["objective", "difference_se"], prof_rows)

        # model-vs-data unconditional choice probabilities in persuasion markets
        data_p = _data_shares(pan1, L)
        fit_rows = []
        for j in range(J):
            row = [cfg.choice.option_labels[j]]
            for k in range(K):
                for l in range(L):
                    row += [float(th.h[j, k, l]), float(data_p[j, k, l])]
            fit_rows.append(row)
        fit_header = ["option"] + [f"{c}_group{k + 1}_level{l + 1}" for k in range(K) for l in range(L) for c in ("model", "data")]
        write_table(out / "model_fit.csv", fit_header, fit_rows)

        # signal informativeness per group at the estimate, on the recovered prior
        s_hat = strategy.with_theta(th.theta)
        ent_rows = []
        for k in range(K):
            ent_rows.append([cfg.choice.group_labels[k], pc.families[k], float(th.theta[pc.theta_index[k]]), signal_marginal_entropy(ps.belief, s_hat, k)])
        write_table(out / "entropy.csv", ["group", "family", "theta_hat", "signal_entropy_bits"], ent_rows)
        outputs += [out / "theta.csv", out / "theta_profile.csv", out / "model_fit.csv", out / "entropy.csv"]
        summary["theta"] = {
            "estimate": th.theta, "objective": th.objective, "weak_identification": weak, "plateau": th.plateau,
            "h": th.h, "bootstrap_draws": boot, "bootstrap_note": BOOTSTRAP_LABEL if boot is not None else None,
        }
        summary["persuasion"] = as_plain(pc)
        print(f"stage 2: {len(pan1.ids)} markets, theta = {np.round(th.theta, 6).tolist()}" + (" (weakly identified)" if weak else ""))

    (out / "estimates.json").write_text(json.dumps(as_plain(summary), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs.append(out / "estimates.json")
    write_manifest(out, "estimate", cfg, cfg.seed, argv, timer.t, outputs, {"data": str(args.data), "jobs": args.jobs})
    if weak and args.strict:
        print("weak identification of theta escalated by --strict", file=sys.stderr)
        return EXIT_WEAK
    return EXIT_OK


def _pad_alpha(se):
    if se is None:
        return None
    return np.concatenate([se, np.zeros((1,) + se.shape[1:])], axis=0)


# --------------------------------------------------------------------------- welfare


def cmd_welfare(args, argv) -> int:
    timer = _Timer()
    src = args.data
    est_path, ps_path = src / "estimates.json", src / "pseudo_shocks.csv"
    for p in (est_path, ps_path):
        if not p.exists():
            raise InputError(f"missing input {p}; run 'estimate' first")
    est = json.loads(est_path.read_text(encoding="utf-8"))
    params = PreferenceParams(np.array(est["stage1"]["alpha"]), np.array(est["stage1"]["p0"]))
    rows = read_table(ps_path)
    J = params.J
    shocks = np.array([[float(r[f"eps_{j + 1}"]) for j in range(J)] for r in rows])
    levels = np.array([int(r["x_level"]) - 1 for r in rows])
    ids = tuple(r["market_id"] for r in rows)
    prior = PseudoShocks(Belief.empirical(shocks), shocks, ids, levels)
    cfg = load_config(args.config, args.seed) if args.config is not None else None
    bins = cfg.welfare_bins if cfg else 30
    strategy = None
    if est.get("theta") and est.get("persuasion"):
        pc = est["persuasion"]
        from .persuasion import PersuasionStrategy

        strategy = PersuasionStrategy(tuple(pc["families"]), est["theta"]["estimate"], tuple(pc["theta_index"]), rep=pc["rep"], dem=pc["dem"])
    with timer("welfare"):
        res = welfare_distribution(prior, params, strategy=strategy, bins=bins, jobs=args.jobs)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    regimes = [("no_persuasion", res.baseline)] + ([("persuasion", res.persuaded)] if res.persuaded else [])
    summary, hist, values = [], [], []
    for name, groups in regimes:
        for k, g in enumerate(groups):
            summary.append([name, k + 1, g.mean, g.std, len(g.values)])
            for b in range(g.mass.size):
                hist.append([name, k + 1, float(g.edges[b]), float(g.edges[b + 1]), float(g.mass[b])])
    for i, mid in enumerate(ids):
        values.append([mid] + [float(g.values[i]) for _, groups in regimes for g in groups])
    write_table(out / "welfare_summary.csv", ["regime", "group", "mean", "std", "n"], summary)
    write_table(out / "welfare_histogram.csv", ["regime", "group", "bin_lo", "bin_hi", "mass"], hist)
    write_table(out / "welfare_values.csv", ["market_id"] + [f"{name}_group{k + 1}" for name, groups in regimes for k in range(len(groups))], values)
    outs = [out / "welfare_summary.csv", out / "welfare_histogram.csv", out / "welfare_values.csv"]
    write_manifest(out, "welfare", cfg, cfg.seed if cfg else None, argv, timer.t, outs, {"data": str(src), "jobs": args.jobs})
    for name, k, m, s, n in summary:
        print(f"{name:14s} group {k}: mean achievement {m:.4f} (sd {s:.4f}, n={n})")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "welfare": cmd_welfare}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args, argv)
    except (InputError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        trace = getattr(exc, "trace", None)
        if trace:
            print(f"optimizer trace (last entries): {trace[-3:]}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
