"""Command line entry points: simulate, fit, sbc, score.

Every invocation writes a ``manifest.json`` into the output directory
(before the heavy work starts, so it survives failures) recording the
command, resolved configuration, seed, and SHA-256 digests of all input
files.  Outputs contain no timestamps or machine state, so rerunning a
command with the same seed and inputs reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .dataio import (
    DATASET_FILES,
    read_dataset,
    sha256_file,
    truth_to_dict,
    write_dataset,
)
from .diagnostics import effective_sample_size, split_rhat
from .graph import make_grid
from .membership import simulate_membership_matrix
from .model import (
    ModelSpec,
    draw_prior_params,
    param_names,
    pointwise_loglik_draws,
    replicate_counts_draws,
    risk_draws,
    simulate_counts,
)
from .sampler import PosteriorSamples, SamplerConfig, run_chains
from .sbc import SbcStudyConfig, StudyAborted, run_study, write_study_outputs
from .scoring import (
    ScoreReport,
    elpd_diff,
    exceedance_prob,
    marginal_ppp,
    mixed_ppp,
    psis_loo_elpd,
    quintile_risk_profile,
    rps_mean,
    dss_mean,
)

__all__ = ["RunManifest", "cmd_simulate", "cmd_fit", "cmd_sbc", "cmd_score", "main"]

_F = "%.17g"  # float format for all CSV output


@dataclasses.dataclass
class RunManifest:
    """What ran, on what inputs, with what configuration."""

    command: str
    package_version: str
    seed: int | None
    config: dict
    inputs: dict  # absolute path -> sha256 digest

    def write(self, outdir) -> str:
        path = os.path.join(outdir, "manifest.json")
        payload = dataclasses.asdict(self)
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
        return path


def _load_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _resolve_seed(args, cfg) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _write_manifest(args, command, cfg, inputs, seed) -> None:
    os.makedirs(args.out, exist_ok=True)
    digests = {os.path.abspath(p): sha256_file(p) for p in inputs}
    RunManifest(
        command=command,
        package_version=__version__,
        seed=seed,
        config=cfg,
        inputs=digests,
    ).write(args.out)


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    adjacency = args.adjacency or cfg.get("adjacency", "rook")
    resolved = {
        "rows": int(cfg.get("rows", 4)),
        "cols": int(cfg.get("cols", 5)),
        "m": int(cfg["m"]),
        "likelihood": cfg.get("likelihood", "poisson"),
        "parameterisation": cfg.get("parameterisation", "post"),
        "spatial": cfg.get("spatial", "car"),
        "n_covariates": int(cfg.get("n_covariates", 2)),
        "offsets_mean": float(cfg.get("offsets_mean", 20.0)),
        "adjacency": adjacency,
        "seed": seed,
    }
    _write_manifest(args, "simulate", resolved, [args.config], seed)

    rng = np.random.default_rng(seed)
    graph = make_grid(resolved["rows"], resolved["cols"], adjacency)
    membership = simulate_membership_matrix(graph, resolved["m"], rng)
    X = rng.standard_normal((graph.n, resolved["n_covariates"]))
    X = (X - X.min(axis=0)) / (X.max(axis=0) - X.min(axis=0))
    offsets = np.maximum(
        rng.poisson(resolved["offsets_mean"], size=resolved["m"]), 1
    ).astype(float)
    spec = ModelSpec(
        likelihood=resolved["likelihood"],
        parameterisation=resolved["parameterisation"],
        spatial=resolved["spatial"],
        graph=graph,
        membership=membership,
        covariates=X,
        offsets=offsets,
    )
    truth = draw_prior_params(spec, rng)
    y = simulate_counts(spec, truth, rng)
    write_dataset(
        args.out,
        graph,
        membership,
        X,
        offsets,
        y,
        truth=truth_to_dict(truth, resolved["parameterisation"]),
    )
    print(f"simulated {membership.m} memberships over {graph.n} areas -> {args.out}")
    return 0


def _spec_from_bundle(bundle, cfg) -> ModelSpec:
    return ModelSpec(
        likelihood=cfg.get("likelihood", "poisson"),
        parameterisation=cfg.get("parameterisation", "post"),
        spatial=cfg.get("spatial", "car"),
        graph=bundle["graph"],
        membership=bundle["membership"],
        covariates=bundle["covariates"],
        offsets=bundle["offsets"],
        y=bundle["y"],
    )


def _sampler_config(cfg, seed, chains=None, iters=None) -> SamplerConfig:
    return SamplerConfig(
        chains=int(chains if chains is not None else cfg.get("chains", 2)),
        iterations=int(iters if iters is not None else cfg.get("iterations", 2000)),
        warmup_fraction=float(cfg.get("warmup_fraction", 0.5)),
        thin=int(cfg.get("thin", 1)),
        leapfrog_steps=int(cfg.get("leapfrog_steps", 16)),
        target_accept=float(cfg.get("target_accept", 0.8)),
        seed=seed,
    )


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    data_dir = os.path.abspath(args.data)
    resolved = dict(cfg)
    resolved.update(
        {
            "seed": seed,
            "data": data_dir,
            "chains": int(args.chains if args.chains is not None else cfg.get("chains", 2)),
            "iterations": int(args.iters if args.iters is not None else cfg.get("iterations", 2000)),
        }
    )
    inputs = [args.config] + [os.path.join(data_dir, f) for f in DATASET_FILES]
    _write_manifest(args, "fit", resolved, inputs, seed)

    bundle = read_dataset(data_dir)
    spec = _spec_from_bundle(bundle, resolved)
    sampler_cfg = _sampler_config(resolved, seed, resolved["chains"], resolved["iterations"])
    samples = run_chains(spec, sampler_cfg)

    names = samples.names
    for k in range(samples.n_chains):
        path = os.path.join(args.out, f"chain_{k + 1:02d}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for row in samples.chains[k]:
                writer.writerow([_F % v for v in row])

    stacked = samples.stacked()
    multi = samples.n_chains >= 2
    rows = []
    per_param = {}
    for j, name in enumerate(names):
        col = stacked[:, j]
        chains_col = samples.chains[:, :, j]
        degenerate = np.ptp(chains_col) == 0.0
        rhat = split_rhat(chains_col) if multi and not degenerate else float("nan")
        ess = effective_sample_size(chains_col) if multi and not degenerate else float("nan")
        rows.append(
            [
                name,
                col.mean(),
                col.std(ddof=1),
                np.quantile(col, 0.025),
                np.median(col),
                np.quantile(col, 0.975),
                rhat,
                ess,
            ]
        )
        per_param[name] = {"rhat": rhat, "ess": ess}
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "mean", "sd", "q025", "median", "q975", "rhat", "ess"])
        for row in rows:
            writer.writerow([row[0]] + [_F % v for v in row[1:]])

    finite_rhats = [v["rhat"] for v in per_param.values() if np.isfinite(v["rhat"])]
    finite_ess = [v["ess"] for v in per_param.values() if np.isfinite(v["ess"])]
    diagnostics = {
        "accept_rate": samples.accept_rate.tolist(),
        "mean_accept_prob": samples.mean_accept.tolist(),
        "divergences": samples.divergences.tolist(),
        "step_size": samples.step_size.tolist(),
        "max_rhat": max(finite_rhats) if finite_rhats else None,
        "min_ess": min(finite_ess) if finite_ess else None,
        "per_parameter": per_param,
        "chains": samples.n_chains,
        "kept_per_chain": samples.n_kept,
        "warmup": samples.warmup,
        "thin": samples.thin,
        "seed": seed,
    }
    with open(os.path.join(args.out, "diagnostics.json"), "w") as fh:
        json.dump(diagnostics, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(
        f"fit: {samples.n_chains} chains x {samples.n_kept} draws, "
        f"max rhat {diagnostics['max_rhat']}, divergences {sum(samples.divergences)}"
    )
    return 0


def cmd_sbc(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    sampler_raw = dict(cfg.get("sampler", {}))
    chains = args.chains if args.chains is not None else sampler_raw.get("chains", 2)
    iters = args.iters if args.iters is not None else sampler_raw.get("iterations", 2000)
    sampler_cfg = _sampler_config(sampler_raw, 0, chains, iters)
    study = SbcStudyConfig(
        rows=int(cfg.get("rows", 4)),
        cols=int(cfg.get("cols", 5)),
        membership_sizes=tuple(cfg.get("membership_sizes", (14, 20, 26))),
        data_parameterisation=cfg.get("data_parameterisation", "post"),
        fit_parameterisation=cfg.get("fit_parameterisation", "post"),
        replicates=int(cfg.get("replicates", 200)),
        likelihood=cfg.get("likelihood", "poisson"),
        n_covariates=int(cfg.get("n_covariates", 2)),
        offsets_mean=float(cfg.get("offsets_mean", 20.0)),
        rhat_threshold=float(cfg.get("rhat_threshold", 1.01)),
        rank_thin=int(cfg.get("rank_thin", 10)),
        seed=seed,
        sampler=sampler_cfg,
    )
    resolved = dataclasses.asdict(study)
    _write_manifest(args, "sbc", resolved, [args.config], seed)
    try:
        result = run_study(study)
    except StudyAborted as exc:
        write_study_outputs(exc.partial, args.out)
        print(f"sbc aborted: {exc}", file=sys.stderr)
        return 1
    write_study_outputs(result, args.out)
    for row in result.coverage:
        print(
            f"m={row['membership_size']} {row['parameter']}: "
            f"coverage {row['coverage']:.4f} (n={row['n']})"
        )
    return 0


def _read_fit(fitdir) -> dict:
    manifest_path = os.path.join(fitdir, "manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("command") != "fit":
        raise ValueError(f"{fitdir}: not a fit output directory")
    cfg = manifest["config"]
    bundle = read_dataset(cfg["data"])
    spec = _spec_from_bundle(bundle, cfg)
    names = param_names(spec)
    chains = []
    k = 1
    while True:
        path = os.path.join(fitdir, f"chain_{k:02d}.csv")
        if not os.path.exists(path):
            break
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != names:
                raise ValueError(f"{path}: chain columns do not match the model")
            chains.append(np.array([[float(v) for v in row] for row in reader]))
        k += 1
    if not chains:
        raise ValueError(f"{fitdir}: no chain files found")
    arr = np.asarray(chains)
    samples = PosteriorSamples(
        names=names,
        chains=arr,
        accept_rate=np.full(arr.shape[0], np.nan),
        mean_accept=np.full(arr.shape[0], np.nan),
        divergences=np.zeros(arr.shape[0], dtype=np.int64),
        step_size=np.full(arr.shape[0], np.nan),
        seed=int(manifest.get("seed") or 0),
        warmup=0,
        thin=1,
    )
    data_digest = sha256_file(os.path.join(cfg["data"], "data.csv"))
    return {
        "dir": fitdir,
        "label": os.path.basename(os.path.normpath(fitdir)),
        "spec": spec,
        "samples": samples,
        "data_digest": data_digest,
        "config": cfg,
    }


def cmd_score(args) -> int:
    seed = args.seed if args.seed is not None else 0
    fits = [_read_fit(d) for d in args.fits]
    digests = {f["data_digest"] for f in fits}
    if len(digests) > 1:
        raise ValueError(
            "fits were made on different data; predictive comparison needs a "
            "shared dataset"
        )
    inputs = []
    for f in fits:
        inputs.append(os.path.join(f["dir"], "manifest.json"))
        k = 1
        while os.path.exists(os.path.join(f["dir"], f"chain_{k:02d}.csv")):
            inputs.append(os.path.join(f["dir"], f"chain_{k:02d}.csv"))
            k += 1
    config = {"fits": [os.path.abspath(d) for d in args.fits], "seed": seed}
    _write_manifest(args, "score", config, inputs, seed)

    reports = []
    loos = []
    for i, f in enumerate(fits):
        spec, samples = f["spec"], f["samples"]
        draws = samples.stacked()
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        loglik = pointwise_loglik_draws(spec, draws)
        loo = psis_loo_elpd(loglik)
        loos.append(loo)
        reps = replicate_counts_draws(spec, draws, rng)
        even = reps.shape[0] - (reps.shape[0] % 2)
        y = spec.require_y()
        _, rho, _ = risk_draws(spec, draws)
        report = ScoreReport(
            model=f["label"],
            elpd=loo.elpd,
            elpd_se=loo.se,
            pointwise_elpd=loo.pointwise,
            pareto_k=loo.pareto_k,
            loo_smoothed=loo.smoothed,
            rps=rps_mean(y, reps[:even]),
            dss=dss_mean(y, reps),
            marginal_p=marginal_ppp(y, reps),
            mixed_p=(
                mixed_ppp(spec, samples, np.random.default_rng(np.random.SeedSequence((seed, i, 1))))
                if spec.spatial != "none"
                else None
            ),
            exceedance=exceedance_prob(rho),
            quintiles=np.stack(
                [
                    quintile_risk_profile(rho.mean(axis=0), spec.covariates[:, c])
                    for c in range(spec.p)
                ]
            ),
        )
        reports.append(report)
        with open(os.path.join(args.out, f"report_{i + 1:02d}_{f['label']}.json"), "w") as fh:
            fh.write(report.to_json())
            fh.write("\n")

    with open(os.path.join(args.out, "comparison.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "elpd", "elpd_se", "elpd_diff", "diff_se", "rps", "dss"])
        for i, (f, rep) in enumerate(zip(fits, reports)):
            if i == 0:
                diff, dse = 0.0, 0.0
            else:
                diff, dse = elpd_diff(loos[i], loos[0])
            writer.writerow(
                [rep.model]
                + [_F % v for v in (rep.elpd, rep.elpd_se, diff, dse, rep.rps, rep.dss)]
            )

    for rep in reports:
        print(
            f"{rep.model}: elpd {rep.elpd:.2f} +/- {rep.elpd_se:.2f}, "
            f"rps {rep.rps:.3f}, dss {rep.dss:.3f}, "
            f"loo tail flags {rep.pareto_k.max():.2f} max k"
        )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="carmm",
        description="Disease mapping with CAR priors over multiple-membership data",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate a dataset bundle")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--adjacency", choices=["rook", "queen"], default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit a model to a dataset bundle")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--chains", type=int, default=None)
    p_fit.add_argument("--iters", type=int, default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_sbc = sub.add_parser("sbc", help="run a calibration study")
    p_sbc.add_argument("--config", required=True)
    p_sbc.add_argument("--out", required=True)
    p_sbc.add_argument("--seed", type=int, default=None)
    p_sbc.add_argument("--chains", type=int, default=None)
    p_sbc.add_argument("--iters", type=int, default=None)
    p_sbc.set_defaults(func=cmd_sbc)

    p_score = sub.add_parser("score", help="score fitted models on shared data")
    p_score.add_argument("fits", nargs="+", help="fit output directories")
    p_score.add_argument("--out", required=True)
    p_score.add_argument("--seed", type=int, default=None)
    p_score.set_defaults(func=cmd_score)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
