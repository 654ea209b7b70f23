"""Command-line entry point: verification suites, profiling, and training.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 recorded
training divergence (a valid experimental outcome, distinct from a crash).
Every run writes a run.json manifest (seed, config hash, versions) to its
output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np
import scipy
from scipy import stats

from . import __version__
from .estimators import EstimatorConfig, estimator_id
from .gap_analysis import gap_closed_form, gap_logistic_form, gap_monte_carlo
from .samplers import (
    OneHotSample,
    RngStream,
    conditional_perturbed_logits_rows,
    gumbel_max_rows,
    rejection_sample_rows,
)
from .variance import (
    LinearLoss,
    gradient_variance,
    variance_csv_row,
    write_variance_csv,
)
from . import vae as vae_bench

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFICATION = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_manifest(out_dir: str, args: argparse.Namespace, config_text: str | None = None):
    os.makedirs(out_dir, exist_ok=True)
    payload = config_text if config_text is not None else repr(sorted(vars(args).items()))
    manifest = {
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "config_hash": hashlib.sha256(payload.encode()).hexdigest(),
        "versions": {
            "gapped-st": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "argv": sys.argv[1:],
    }
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _parse_logits(raw: str) -> np.ndarray:
    try:
        values = np.asarray([float(tok) for tok in raw.split(",") if tok.strip() != ""])
    except ValueError:
        raise UsageError(f"--logits must be comma-separated numbers, got {raw!r}")
    if values.size < 2:
        raise UsageError("--logits needs at least two entries")
    return values


# ---------------------------------------------------------------------------
# verify-gap


def cmd_verify_gap(args) -> int:
    _write_manifest(args.out, args)
    rng = RngStream(args.seed)
    cases: list[tuple[np.ndarray, int]] = []
    if args.logits is not None:
        logits = _parse_logits(args.logits)
        index = args.index
        if not 0 <= index < logits.size:
            raise UsageError(f"--index {index} out of range")
        cases.append((logits, index))
    else:
        dims = (2, 5, 10, 50)
        for c in range(args.random_cases):
            n = dims[c % len(dims)]
            logits = rng.uniform(n) * 6.0 - 3.0
            index = int(rng.uniform(1)[0] * n)
            cases.append((logits, index))

    print(f"{'case':>4} {'N':>3} {'idx':>3} {'analytic':>12} {'monte-carlo':>12} "
          f"{'stderr':>10} {'z':>7}  result")
    rows = []
    all_ok = True
    for c, (logits, index) in enumerate(cases):
        report = gap_monte_carlo(logits, index, rng, args.n)
        logistic = gap_logistic_form(logits, index)
        forms_ok = abs(logistic - report.analytic_gap) <= 1e-10 * max(abs(logistic), 1.0)
        ok = report.agrees(3.0) and forms_ok
        all_ok &= ok
        print(
            f"{c:>4} {logits.size:>3} {index:>3} {report.analytic_gap:>12.6f} "
            f"{report.mc_gap:>12.6f} {report.mc_stderr:>10.2e} {report.z_score:>7.2f}  "
            f"{'pass' if ok else 'FAIL'}"
        )
        rows.append(
            {
                "case": c, "n": logits.size, "index": index,
                "analytic": repr(report.analytic_gap), "mc": repr(report.mc_gap),
                "stderr": repr(report.mc_stderr), "pass": ok,
            }
        )
    with open(os.path.join(args.out, "verify_gap.json"), "w") as fh:
        json.dump(rows, fh, indent=2)
    print(f"{sum(r['pass'] for r in rows)}/{len(rows)} cases pass")
    return EXIT_OK if all_ok else EXIT_VERIFICATION


# ---------------------------------------------------------------------------
# sample-check


def _chi_square_gumbel_max(logits: np.ndarray, rng: RngStream, n: int) -> float:
    index, _, _ = gumbel_max_rows(np.broadcast_to(logits, (n, logits.size)), rng)
    counts = np.bincount(index, minlength=logits.size)
    z = logits - logits.max()
    probs = np.exp(z) / np.exp(z).sum()
    return float(stats.chisquare(counts, probs * n).pvalue)


def cmd_sample_check(args) -> int:
    _write_manifest(args.out, args)
    rng = RngStream(args.seed)
    failures = []

    print("gumbel-max marginal (chi-square):")
    for logits in (
        np.zeros(3),
        np.log(np.asarray([1.0, 2.0, 3.0])),
        rng.uniform(10) * 6.0 - 3.0,
    ):
        p = _chi_square_gumbel_max(logits, rng, args.n)
        status = "pass" if p > 0.01 else "FAIL"
        if p <= 0.01:
            failures.append("gumbel-max marginal")
        print(f"  N={logits.size:<3} p={p:.4f}  {status}")

    print("conditional draws vs rejection oracle (per-coordinate KS):")
    for case in range(3):
        n_cat = (2, 3, 5)[case]
        logits = rng.uniform(n_cat) * 2.0 - 1.0
        for index in range(n_cat):
            cond = conditional_perturbed_logits_rows(
                logits[None, :], np.asarray([index]), rng, k=args.n
            )[0]
            rej = rejection_sample_rows(logits, index, rng, args.n, max_proposals=200 * args.n)
            p_vals = [
                stats.ks_2samp(cond[:, coord], rej[:, coord]).pvalue
                for coord in range(n_cat)
            ]
            worst = min(p_vals)
            status = "pass" if worst > 0.01 else "FAIL"
            if worst <= 0.01:
                failures.append(f"conditional case {case} index {index}")
            print(f"  N={n_cat} idx={index} min-p={worst:.4f}  {status}")

    if failures:
        print(f"{len(failures)} check(s) failed")
        return EXIT_VERIFICATION
    print("all sampling checks pass")
    return EXIT_OK


# ---------------------------------------------------------------------------
# variance


def _estimator_from_name(name: str, tau: float, gap, k: int) -> EstimatorConfig:
    return EstimatorConfig(kind=name, tau=tau, gap=gap, mc_samples=k)


def cmd_variance(args) -> int:
    _write_manifest(args.out, args)
    rng = RngStream(args.seed)
    gap = args.gap if args.gap == "pi" else float(args.gap)

    if args.problem == "linear":
        logits = rng.uniform(10) * 4.0 - 2.0
        weights = rng.uniform(10) * 2.0 - 1.0
        loss = LinearLoss(weights)
        samplers = {
            kind: (logits, _estimator_from_name(kind, args.tau, gap, args.K), loss)
            for kind in args.estimator
        }
        reports = {
            kind: gradient_variance(state, cfg, loss_fn, args.resamples, rng)
            for kind, (state, cfg, loss_fn) in samplers.items()
        }
        configs = {kind: samplers[kind][1] for kind in samplers}
    else:
        ds = vae_bench.DatasetConfig(kind="SYNTHETIC", n=1000, seed=args.seed)
        warm = vae_bench.TrainConfig(
            estimator=EstimatorConfig("STGS", tau=args.tau),
            dataset=ds, epochs=1, batch_size=100,
            schedule=vae_bench.ScheduleConfig("CONSTANT", tau=args.tau),
        )
        snapshot = vae_bench.train(warm, seed=args.seed)
        data = vae_bench.load_dataset(ds)
        probe = data[:4]
        reports, configs = {}, {}
        for kind in args.estimator:
            cfg = _estimator_from_name(kind, args.tau, gap, args.K)
            sampler = vae_bench.vae_gradient_sampler(snapshot.model, probe, cfg)
            reports[kind] = gradient_variance(sampler, cfg, None, args.resamples, rng)
            configs[kind] = cfg

    rows = [
        variance_csv_row(configs[kind], reports[kind], args.seed)
        for kind in args.estimator
    ]
    csv_path = os.path.join(args.out, "variance.csv")
    write_variance_csv(csv_path, rows)

    print(f"total gradient variance ({args.problem} problem, tau={args.tau:g}, "
          f"{args.resamples} resamples):")
    ordering = sorted(args.estimator, key=lambda kind: reports[kind].total_variance)
    for kind in ordering:
        rep = reports[kind]
        stderr = "" if rep.total_stderr is None else f"  (stderr {rep.total_stderr:.3g})"
        print(f"  {estimator_id(configs[kind]):>12}: {rep.total_variance:.6g}{stderr}")
    print("ordering: " + " < ".join(estimator_id(configs[kind]) for kind in ordering))
    print(f"wrote {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / ablation


def cmd_train(args) -> int:
    try:
        cfg = vae_bench.load_config(args.config)
    except (OSError, vae_bench.ConfigError) as exc:
        raise UsageError(f"config: {exc}")
    with open(args.config) as fh:
        _write_manifest(args.out, args, config_text=fh.read())

    any_diverged = False
    csv_path = os.path.join(args.out, "metrics.csv")
    first = True
    for seed in cfg.seeds:
        result = vae_bench.train(cfg, seed, out_dir=args.out)
        vae_bench.write_metrics_csv(
            csv_path, vae_bench.metrics_csv_rows(result, cfg), append=not first
        )
        first = False
        if result.diverged:
            any_diverged = True
            print(f"seed {seed}: DIVERGED ({result.divergence_reason})")
        else:
            print(f"seed {seed}: final neg-ELBO {result.final_neg_elbo:.4f}")
    print(f"wrote {csv_path}")
    return EXIT_DIVERGED if any_diverged else EXIT_OK


ABLATION_GRID = (
    ("ST_NAIVE", None),
    ("NZ_GST", 0.0),
    ("NZ_GST", 1.0),
    ("GST", 0.0),
    ("GST", 1.0),
)


def cmd_ablation(args) -> int:
    try:
        cfg = vae_bench.load_config(args.config)
    except (OSError, vae_bench.ConfigError) as exc:
        raise UsageError(f"config: {exc}")
    with open(args.config) as fh:
        _write_manifest(args.out, args, config_text=fh.read())

    rows = []
    any_diverged = False
    for tau in cfg.ablation_temperatures:
        for kind, gap in ABLATION_GRID:
            est = EstimatorConfig(kind=kind, tau=tau, gap=gap if gap is not None else 1.0)
            run_cfg = replace(
                cfg,
                estimator=est,
                schedule=vae_bench.ScheduleConfig("CONSTANT", tau=tau),
            )
            finals = []
            for seed in cfg.seeds:
                result = vae_bench.train(run_cfg, seed)
                if result.diverged:
                    any_diverged = True
                finals.append(result.final_neg_elbo)
            finals = np.asarray(finals)
            rows.append(
                {
                    "estimator": estimator_id(est),
                    "tau": f"{tau:g}",
                    "mean_neg_elbo": repr(float(finals.mean())),
                    "std": repr(float(finals.std(ddof=1))) if finals.size > 1 else "",
                    "seeds": ",".join(str(s) for s in cfg.seeds),
                }
            )
            print(
                f"tau={tau:<4g} {estimator_id(est):>12}: "
                f"neg-ELBO {finals.mean():.4f} +- {finals.std(ddof=1) if finals.size > 1 else 0.0:.4f}"
            )

    csv_path = os.path.join(args.out, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        import csv as _csv

        writer = _csv.DictWriter(
            fh, fieldnames=["estimator", "tau", "mean_neg_elbo", "std", "seeds"]
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {csv_path}")
    return EXIT_DIVERGED if any_diverged else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="gapped-st", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-gap", help="closed-form vs Monte-Carlo expected gap")
    p.add_argument("--n", type=int, default=100_000, help="Monte-Carlo draws per case")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--logits", type=str, default=None, help="comma-separated logit vector")
    p.add_argument("--index", type=int, default=0, help="conditioning index for --logits")
    p.add_argument("--random-cases", type=int, default=20)
    p.add_argument("--out", type=str, default="runs/verify-gap")
    p.set_defaults(func=cmd_verify_gap)

    p = sub.add_parser("sample-check", help="distributional checks for the samplers")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default="runs/sample-check")
    p.set_defaults(func=cmd_sample_check)

    p = sub.add_parser("variance", help="gradient variance profiling")
    p.add_argument(
        "--estimator", nargs="+", default=["STGS", "GST"],
        choices=["ST_NAIVE", "STGS", "GR_MCK", "GST", "NZ_GST"],
    )
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--gap", type=str, default="1.0", help="gap size or 'pi'")
    p.add_argument("--K", type=int, default=1, help="Monte-Carlo count for GR_MCK")
    p.add_argument("--resamples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--problem", choices=["linear", "vae"], default="linear")
    p.add_argument("--out", type=str, default="runs/variance")
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("train", help="train the categorical VAE from a config file")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--out", type=str, default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablation", help="run the five-estimator ablation grid")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--out", type=str, default="runs/ablation")
    p.set_defaults(func=cmd_ablation)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
