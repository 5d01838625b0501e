"""Command-line pipeline: synthetic cases, surrogate builds, sampling, reports.

Subcommands
-----------
simulate          write a synthetic case bundle (ground truth, lead data, noise)
build-surrogate   fit the GP surrogate of the case's log-posterior
sample            tune, initialize, and run chains in one of three modes
diagnose          recompute convergence diagnostics for a finished run
compare           run all three modes and report errors vs. the exact baseline

Every command is driven by one JSON config plus a mandatory master seed; all
numeric outputs are byte-reproducible for a fixed seed.  Wall-clock timings go
to a separate timings.json so the numeric artifacts stay deterministic.

Exit codes: 0 success, 1 config error, 2 numerical failure, 3 unconverged
chains under --strict.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import diagnostics as diags
from . import forward_model as fm
from . import gp_surrogate as gps
from . import samplers
from .config import ConfigError, ExperimentConfig, build_case, load_config
from .posterior import EvaluationError, PosteriorContext, estimate_sigma_e

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_UNCONVERGED = 3

MODES = ("exact", "two_stage", "surrogate_only")


def _save_csv(path, arr, header: str = ""):
    np.savetxt(path, np.atleast_2d(np.asarray(arr)), delimiter=",", fmt="%.17g",
               header=header, comments="")


def _load_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=0))


def _save_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _derived_seeds(master: int) -> dict:
    children = np.random.SeedSequence(int(master)).spawn(6)
    names = ("noise", "build", "slice", "mixture", "tune", "chains")
    return dict(zip(names, children))


def cmd_simulate(cfg: ExperimentConfig) -> Path:
    """Generate and store the synthetic case bundle."""
    out = Path(cfg.out) / "case"
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    seeds = _derived_seeds(cfg.seed)

    geometry, partition, stimulus, lead_field = build_case(cfg.case)
    theta_true = cfg.case.resolved_theta_true()
    a_field = fm.expand_parameters(theta_true, partition)
    params = fm.APParams(
        a_field=a_field, k=cfg.case.k, d=cfg.case.d, e0=cfg.case.e0,
        mu1=cfg.case.mu1, mu2=cfg.case.mu2,
    )
    sim = fm.simulate_ap(geometry, params, stimulus, cfg.case.dt, cfg.case.t_end,
                         cfg.case.store_every)
    clean = fm.measure_ecg(sim, lead_field)
    noisy = fm.add_noise(clean, cfg.case.snr_db, seed=seeds["noise"])
    sigma_e = estimate_sigma_e(noisy, cfg.case.snr_db)

    _save_csv(out / "theta_true.csv", theta_true)
    _save_csv(out / "a_field.csv", a_field)
    _save_csv(out / "Y_clean.csv", clean.Y)
    _save_csv(out / "Y_noisy.csv", noisy.Y)
    _save_csv(out / "lead_field.csv", lead_field.H)
    config_echo = cfg.to_dict()
    config_echo.pop("out")  # runtime location, not part of the case definition
    _save_json(out / "manifest.json", {
        "master_seed": cfg.seed,
        "noise_seed": "SeedSequence(master).spawn[0]",
        "snr_db": cfg.case.snr_db,
        "sigma_e": sigma_e,
        "n_leads": lead_field.n_leads,
        "n_stored_steps": sim.n_stored,
        "n_nodes": geometry.n_nodes,
        "n_regions": partition.n_regions,
        "config": config_echo,
    })
    _save_json(out / "timings.json", {"wall_clock_s": time.perf_counter() - t0})
    return out


def _load_context(cfg: ExperimentConfig) -> PosteriorContext:
    case_dir = Path(cfg.out) / "case"
    manifest_path = case_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"case bundle not found at {case_dir}; run `simulate` first")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    geometry, partition, stimulus, _ = build_case(cfg.case)
    lead_field = fm.LeadField(H=_load_csv(case_dir / "lead_field.csv"))
    y_noisy = _load_csv(case_dir / "Y_noisy.csv")
    return PosteriorContext(
        geometry=geometry,
        partition=partition,
        stimulus=stimulus,
        lead_field=lead_field,
        y_obs=y_noisy,
        sigma_e=manifest["sigma_e"],
        dt=cfg.case.dt,
        t_end=cfg.case.t_end,
        store_every=cfg.case.store_every,
        ap_constants={"k": cfg.case.k, "d": cfg.case.d, "e0": cfg.case.e0,
                      "mu1": cfg.case.mu1, "mu2": cfg.case.mu2},
    )


def cmd_build_surrogate(cfg: ExperimentConfig) -> Path:
    """Fit the surrogate on the case posterior and checkpoint it."""
    ctx = _load_context(cfg)
    out = Path(cfg.out)
    t0 = time.perf_counter()
    seeds = _derived_seeds(cfg.seed)
    bounds = _box(ctx)
    acq = gps.AcquisitionConfig(
        beta=cfg.surrogate.beta,
        budget_max=cfg.surrogate.budget_max,
        stall_tol=cfg.surrogate.stall_tol,
        hyperopt_every=cfg.surrogate.hyperopt_every,
        restarts=cfg.surrogate.restarts,
    )
    init_size = cfg.surrogate.resolved_init_size(ctx.n_params)
    gp = gps.build_surrogate(ctx, bounds, acq, init_size, rng=seeds["build"])
    path = out / "surrogate.json"
    gps.save_checkpoint(gp, path)
    _save_json(out / "surrogate_manifest.json", {
        "master_seed": cfg.seed,
        "exact_evals": gp.build_info["n_exact_evals"],
        "posterior_eval_count": ctx.eval_count,
        "n_training_points": gp.training.size,
        "init_design_size": gp.build_info["init_design_size"],
        "n_acquired": gp.build_info["n_acquired"],
        "stalled": gp.build_info["stalled"],
    })
    _save_json(out / "surrogate_timings.json", {"wall_clock_s": time.perf_counter() - t0})
    return path


def _box(ctx):
    lo, hi = ctx.bounds
    r = ctx.n_params
    return np.full(r, lo), np.full(r, hi)


def _prepare_sampling(cfg, ctx, gp, seeds):
    """Shared protocol: tune sigma_p on the surrogate, mixture-fit chain starts."""
    bounds = _box(ctx)
    start = gp.training.X[int(np.argmax(gp.training.y))]
    prop = samplers.tune_proposal(
        gp, bounds, start,
        target_range=(cfg.sampling.accept_lo, cfg.sampling.accept_hi),
        rng=seeds["tune"], pilot_steps=cfg.sampling.pilot_steps,
    )
    surr_samples = samplers.slice_sample_surrogate(
        gp, bounds, cfg.sampling.slice_samples, rng=seeds["slice"],
        burn_in=cfg.sampling.slice_burn_in,
    )
    inits = samplers.fit_mixture(surr_samples, cfg.sampling.chains, rng=seeds["mixture"])
    lo, hi = bounds
    inits.means = np.clip(inits.means, lo, hi)
    return prop, inits


def _run_mode(cfg: ExperimentConfig, ctx, gp, mode: str):
    """Run one sampling mode end to end; returns artifacts for reporting."""
    seeds = _derived_seeds(cfg.seed)
    prop, inits = _prepare_sampling(cfg, ctx, gp, seeds)
    chain_seeds = seeds["chains"].spawn(cfg.sampling.chains)
    evals_before = ctx.eval_count
    chains = samplers.run_chains(
        ctx, gp, inits, prop, cfg.sampling.steps, mode, chain_seeds
    )
    sampling_evals = ctx.eval_count - evals_before
    pooled = samplers.postprocess(chains, cfg.sampling.burn_in_frac, cfg.sampling.thin)
    post_burn = [
        c.samples[int(np.floor(cfg.sampling.burn_in_frac * c.samples.shape[0])):]
        for c in chains
    ]
    report = diags.make_report(post_burn)
    summary = diags.summarize(pooled, ctx.partition, bounds=ctx.bounds)
    return {
        "prop": prop,
        "inits": inits,
        "chains": chains,
        "pooled": pooled,
        "report": report,
        "summary": summary,
        "sampling_evals": sampling_evals,
    }


def _write_run(cfg: ExperimentConfig, mode: str, run, wall_clock: float) -> Path:
    out = Path(cfg.out) / f"sample_{mode}"
    out.mkdir(parents=True, exist_ok=True)
    r = run["chains"][0].samples.shape[1]
    header = "step," + ",".join(f"theta_{i}" for i in range(r)) + ",log_post,stage1_pass"
    for cid, chain in enumerate(run["chains"]):
        steps = np.arange(chain.samples.shape[0])
        stage1 = np.concatenate([[1.0], chain.stage1_pass.astype(float)])
        table = np.column_stack([steps, chain.samples, chain.log_posts, stage1])
        _save_csv(out / f"chain_{cid}.csv", table, header=header)
    _save_csv(out / "pooled.csv", run["pooled"])
    _save_json(out / "diagnostics.json", run["report"].to_dict())
    summary = run["summary"]
    _save_json(out / "summary.json", {
        "mean": summary.mean.tolist(),
        "mode": summary.mode.tolist(),
        "std": summary.std.tolist(),
        "bimodal": summary.bimodal.tolist(),
        "correlation": summary.correlation.tolist(),
    })
    _write_kde(out / "kde.csv", run["pooled"], bounds=(0.0, 0.52))
    stats_total = {key: int(sum(c.stats[key] for c in run["chains"]))
                   for key in run["chains"][0].stats}
    _save_json(out / "manifest.json", {
        "mode": mode,
        "master_seed": cfg.seed,
        "sigma_p": run["prop"].sigma_p,
        "pilot_acceptance": run["prop"].acceptance_rate,
        "pilot_bracketed": run["prop"].bracketed,
        "chain_starts": run["inits"].means.tolist(),
        "per_chain_stats": [c.stats for c in run["chains"]],
        "totals": stats_total,
        "sampling_exact_evals": int(run["sampling_evals"]),
        "pooled_count": int(run["pooled"].shape[0]),
        "converged": run["report"].converged,
    })
    _save_json(out / "timings.json", {"wall_clock_s": wall_clock})
    return out


def _write_kde(path, pooled, bounds, grid_size: int = 512):
    from scipy.stats import gaussian_kde

    grid = np.linspace(bounds[0], bounds[1], grid_size)
    cols = [grid]
    for p in range(pooled.shape[1]):
        col = pooled[:, p]
        if col.std() == 0.0:
            cols.append(np.zeros(grid_size))
        else:
            cols.append(gaussian_kde(col, bw_method="silverman")(grid))
    header = "grid," + ",".join(f"density_{i}" for i in range(pooled.shape[1]))
    _save_csv(path, np.column_stack(cols), header=header)


def cmd_sample(cfg: ExperimentConfig, mode: str, strict: bool = False) -> int:
    ctx = _load_context(cfg)
    gp = _load_surrogate(cfg)
    t0 = time.perf_counter()
    run = _run_mode(cfg, ctx, gp, mode)
    out = _write_run(cfg, mode, run, time.perf_counter() - t0)
    print(f"wrote {out}")
    if not run["report"].converged:
        print("warning: convergence diagnostics failed (|z| >= 2 or R-hat >= 1.1)",
              file=sys.stderr)
        if strict:
            return EXIT_UNCONVERGED
    return EXIT_OK


def _load_surrogate(cfg: ExperimentConfig):
    path = Path(cfg.out) / "surrogate.json"
    if not path.exists():
        raise ConfigError(f"surrogate checkpoint not found at {path}; "
                          "run `build-surrogate` first")
    return gps.load_checkpoint(path)


def cmd_diagnose(cfg: ExperimentConfig, run_dir, strict: bool = False) -> int:
    """Recompute diagnostics from stored chain CSVs."""
    run_dir = Path(run_dir)
    chain_files = sorted(run_dir.glob("chain_*.csv"))
    if not chain_files:
        raise ConfigError(f"no chain CSVs found in {run_dir}")
    chains = []
    for path in chain_files:
        table = np.loadtxt(path, delimiter=",", skiprows=1)
        r = table.shape[1] - 3
        chains.append(table[:, 1:1 + r])
    post_burn = [
        c[int(np.floor(cfg.sampling.burn_in_frac * c.shape[0])):] for c in chains
    ]
    report = diags.make_report(post_burn)
    _save_json(run_dir / "diagnostics.json", report.to_dict())
    for p in range(report.geweke_z.size):
        print(f"param {p}: geweke_z={report.geweke_z[p]:+.3f} "
              f"rhat={report.rhat[p]:.4f} ess={report.ess[p]:.0f}")
    print(f"converged: {report.converged}")
    if strict and not report.converged:
        return EXIT_UNCONVERGED
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, strict: bool = False) -> int:
    """Run all three modes against one case and report errors vs. exact MH."""
    ctx_probe = _load_context(cfg)
    gp = _load_surrogate(cfg)
    build_evals = (gp.build_info or {}).get("n_exact_evals", gp.training.size)

    results = {}
    for mode in MODES:
        ctx = _load_context(cfg)  # fresh eval counter per mode
        t0 = time.perf_counter()
        run = _run_mode(cfg, ctx, gp, mode)
        _write_run(cfg, mode, run, time.perf_counter() - t0)
        results[mode] = run
    del ctx_probe

    base = results["exact"]["summary"]
    report = {"master_seed": cfg.seed, "surrogate_build_evals": int(build_evals), "modes": {}}
    rows = []
    for mode in MODES:
        s = results[mode]["summary"]
        evals = int(results[mode]["sampling_evals"])
        total = evals + (build_evals if mode == "two_stage" else 0)
        dmean = np.abs(s.mean - base.mean)
        dmode = np.abs(s.mode - base.mode)
        dstd = np.abs(s.std - base.std)
        report["modes"][mode] = {
            "sampling_exact_evals": evals,
            "total_exact_evals": int(total),
            "pooled_count": int(results[mode]["pooled"].shape[0]),
            "abs_delta_mean": dmean.tolist(),
            "abs_delta_mode": dmode.tolist(),
            "abs_delta_std": dstd.tolist(),
        }
        for p in range(dmean.size):
            rows.append([mode, p, dmean[p], dmode[p], dstd[p]])
    exact_evals = report["modes"]["exact"]["total_exact_evals"]
    two_stage_evals = report["modes"]["two_stage"]["total_exact_evals"]
    report["exact_eval_reduction"] = 1.0 - two_stage_evals / exact_evals

    out = Path(cfg.out) / "compare"
    out.mkdir(parents=True, exist_ok=True)
    _save_json(out / "report.json", report)
    with open(out / "table.csv", "w") as fh:
        fh.write("mode,param,abs_delta_mean,abs_delta_mode,abs_delta_std\n")
        for mode, p, dm, dmo, ds in rows:
            fh.write(f"{mode},{p},{dm:.17g},{dmo:.17g},{ds:.17g}\n")
    print(f"wrote {out} (exact-eval reduction: {report['exact_eval_reduction']:.1%})")
    if strict and not all(results[m]["report"].converged for m in MODES):
        return EXIT_UNCONVERGED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpmh", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="path to the JSON experiment config")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--out", help="output directory (overrides config)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", help="generate the synthetic case bundle")
    sub.add_parser("build-surrogate", help="fit and checkpoint the GP surrogate")
    p_sample = sub.add_parser("sample", help="run MCMC in one mode")
    p_sample.add_argument("--mode", required=True,
                          choices=["exact", "two-stage", "surrogate-only"])
    p_sample.add_argument("--strict", action="store_true",
                          help="exit 3 if diagnostics flag non-convergence")
    p_diag = sub.add_parser("diagnose", help="recompute diagnostics for a run")
    p_diag.add_argument("--run", required=True, help="directory with chain_*.csv")
    p_diag.add_argument("--strict", action="store_true")
    p_cmp = sub.add_parser("compare", help="exact vs two-stage vs surrogate-only")
    p_cmp.add_argument("--strict", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "simulate":
            path = cmd_simulate(cfg)
            print(f"wrote {path}")
            return EXIT_OK
        if args.command == "build-surrogate":
            path = cmd_build_surrogate(cfg)
            print(f"wrote {path}")
            return EXIT_OK
        if args.command == "sample":
            return cmd_sample(cfg, args.mode.replace("-", "_"), strict=args.strict)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, args.run, strict=args.strict)
        if args.command == "compare":
            return cmd_compare(cfg, strict=args.strict)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fm.SimulationBlowupError, EvaluationError, gps.GPFitError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
