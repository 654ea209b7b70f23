"""Empirical gradient-variance measurement at a frozen model state.

Total variance is the trace of the gradient covariance: per-parameter
empirical variances summed. For the conditional estimators the total
splits by the law of total variance into

    (a) mean over samples D of the conditional gradient variance given D,
    (b) variance over D of the conditional gradient mean,

estimated by nested Monte Carlo. GST's surrogate is deterministic given D,
so its term (a) is exactly zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Value, constant, mul, sum_all
from .estimators import (
    EstimatorConfig,
    FrozenDraw,
    GradientBatch,
    SurrogateOutput,
    estimate,
    estimator_id,
)
from .samplers import RngStream, gumbel_max_rows

__all__ = [
    "GradientBatch",
    "VarianceReport",
    "LinearLoss",
    "gradient_variance",
    "variance_decomposition",
    "surrogate_entropy",
    "linear_gradient_samples",
    "write_variance_csv",
    "VARIANCE_CSV_HEADER",
]


class VarianceError(RuntimeError):
    pass


@dataclass
class VarianceReport:
    """Per-parameter gradient variances and their sum, plus the split terms."""

    per_parameter_variance: np.ndarray
    total_variance: float
    term_a: float | None = None
    term_b: float | None = None
    n_outer: int = 0
    n_inner: int = 0
    total_stderr: float | None = None

    def __post_init__(self):
        if self.total_variance < 0.0:
            raise VarianceError("total variance cannot be negative")


@dataclass
class LinearLoss:
    """Loss <w, output> per sample row; the standard profiling objective."""

    weights: np.ndarray

    def __call__(self, output: Value) -> Value:
        w = np.asarray(self.weights, dtype=np.float64)
        tiled = np.broadcast_to(w, output.shape).copy()
        return sum_all(mul(output, constant(tiled)))


def _variance_rows(samples: np.ndarray, ddof: int = 1) -> np.ndarray:
    """Column variances with an exactness guard: constant columns give 0.

    Floating-point means of identical values can round, which would turn a
    deterministic estimator's zero variance into ~1e-32 noise; a constant
    column is zero variance by definition.
    """
    var = samples.var(axis=0, ddof=ddof)
    spread = samples.max(axis=0) - samples.min(axis=0)
    var[spread == 0.0] = 0.0
    return var


def _total_with_stderr(samples: np.ndarray, groups: int = 10):
    """Trace of the gradient covariance plus a batch-means standard error."""
    per_param = _variance_rows(samples)
    total = float(per_param.sum())
    r = samples.shape[0]
    if r < 2 * groups:
        return per_param, total, None
    cut = (r // groups) * groups
    blocks = samples[:cut].reshape(groups, -1, samples.shape[1])
    block_totals = np.array([_variance_rows(b).sum() for b in blocks])
    stderr = float(block_totals.std(ddof=1) / np.sqrt(groups))
    return per_param, total, stderr


def linear_gradient_samples(
    logits: np.ndarray,
    weights: np.ndarray,
    cfg: EstimatorConfig,
    n_samples: int,
    rng: RngStream,
    frozen_index: np.ndarray | None = None,
) -> np.ndarray:
    """(R, N) gradient samples of <w, estimator(logits)> w.r.t. the logits.

    All resamples run as independent rows of one batched call. When
    frozen_index pins the drawn category, every row keeps that category and
    only the conditional noise is redrawn.
    """
    l0 = np.asarray(logits, dtype=np.float64)
    tiled = np.broadcast_to(l0, (n_samples, l0.size)).copy()
    frozen = None
    if frozen_index is not None:
        idx = np.broadcast_to(np.asarray(frozen_index), (n_samples,)).copy()
        onehot = np.zeros_like(tiled)
        onehot[np.arange(n_samples), idx] = 1.0
        frozen = FrozenDraw(idx, onehot, None)
    with Tape() as tape:
        leaf = Value(tiled)
        out = estimate(leaf, cfg, rng, frozen=frozen)
        loss = LinearLoss(weights)(out.output)
        tape.backward(loss)
    return leaf.grad.copy()


def gradient_variance(
    model_state,
    estimator: EstimatorConfig | None,
    loss,
    resamples: int,
    rng: RngStream,
) -> VarianceReport:
    """Resample an estimator's randomness at fixed parameters; report variances.

    model_state is either a logit vector (the categorical problem, paired
    with a LinearLoss or any output->scalar Value loss) or a callable
    (stream) -> flat gradient array, which is how larger models plug in.
    """
    if resamples < 100:
        raise VarianceError("need at least 100 resamples")

    if callable(model_state):
        rows = []
        for r in range(resamples):
            g = np.asarray(model_state(rng), dtype=np.float64).ravel()
            if not np.all(np.isfinite(g)):
                raise VarianceError(f"non-finite gradient at resample {r}")
            rows.append(g)
        samples = np.asarray(rows)
    elif isinstance(loss, LinearLoss):
        samples = linear_gradient_samples(
            np.asarray(model_state), loss.weights, estimator, resamples, rng
        )
        bad = np.nonzero(~np.isfinite(samples).all(axis=1))[0]
        if bad.size:
            raise VarianceError(f"non-finite gradient at resample {bad[0]}")
    else:
        l0 = np.asarray(model_state, dtype=np.float64)
        rows = []
        for r in range(resamples):
            with Tape() as tape:
                leaf = Value(l0.copy())
                out = estimate(leaf, estimator, rng)
                tape.backward(loss(out.output))
            g = leaf.grad.ravel()
            if not np.all(np.isfinite(g)):
                raise VarianceError(f"non-finite gradient at resample {r}")
            rows.append(g.copy())
        samples = np.asarray(rows)

    per_param, total, stderr = _total_with_stderr(samples)
    return VarianceReport(
        per_parameter_variance=per_param,
        total_variance=total,
        n_outer=resamples,
        total_stderr=stderr,
    )


def variance_decomposition(
    model_state,
    estimator: EstimatorConfig,
    loss: LinearLoss,
    n_outer: int,
    n_inner: int,
    rng: RngStream,
) -> VarianceReport:
    """Estimate term (a) = E[V[grad|D]] and term (b) = V[E[grad|D]].

    Outer draws sample the category; inner draws resample the conditional
    noise with the category pinned. The term (b) estimate subtracts the
    inner-noise inflation term_a/n_inner so (a) + (b) is an unbiased match
    for the total variance.
    """
    if estimator.kind not in ("STGS", "GR_MCK", "GST"):
        raise VarianceError(f"decomposition not defined for {estimator.kind}")
    if n_outer < 50 or n_inner < 50:
        raise VarianceError("need n_outer and n_inner >= 50")
    l0 = np.asarray(model_state, dtype=np.float64)
    if l0.ndim != 1:
        raise VarianceError("decomposition expects a single logit vector")

    outer_index, _, _ = gumbel_max_rows(np.broadcast_to(l0, (n_outer, l0.size)), rng)
    inner_vars = np.zeros((n_outer, l0.size))
    inner_means = np.zeros((n_outer, l0.size))
    for o in range(n_outer):
        grads = linear_gradient_samples(
            l0, loss.weights, estimator, n_inner, rng,
            frozen_index=np.asarray([outer_index[o]]),
        )
        if not np.all(np.isfinite(grads)):
            raise VarianceError(f"non-finite gradient at outer draw {o}")
        inner_vars[o] = _variance_rows(grads)
        inner_means[o] = grads.mean(axis=0)

    term_a_per = inner_vars.mean(axis=0)
    term_b_per = _variance_rows(inner_means) - term_a_per / n_inner
    per_param = term_a_per + term_b_per
    term_a = float(term_a_per.sum())
    term_b = float(term_b_per.sum())

    # batch-means standard error over the outer draws, for agreement checks
    se_a = float(inner_vars.sum(axis=1).std(ddof=1) / np.sqrt(n_outer))
    groups = 10
    cut = (n_outer // groups) * groups
    blocks = inner_means[:cut].reshape(groups, -1, l0.size)
    block_b = np.array([_variance_rows(block).sum() for block in blocks])
    se_b = float(block_b.std(ddof=1) / np.sqrt(groups))

    return VarianceReport(
        per_parameter_variance=per_param,
        total_variance=max(term_a + term_b, 0.0),
        term_a=term_a,
        term_b=term_b,
        n_outer=n_outer,
        n_inner=n_inner,
        total_stderr=float(np.hypot(se_a, se_b)),
    )


def surrogate_entropy(estimator_output: SurrogateOutput) -> float:
    """Shannon entropy (nats) of the surrogate distribution, 0 log 0 = 0.

    Batched outputs report the mean entropy across rows.
    """
    p = estimator_output.surrogate_probs.data
    p2 = p.reshape(1, -1) if p.ndim == 1 else p
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p2 > 0.0, p2 * np.log(p2), 0.0)
    return float(-terms.sum(axis=1).mean())


VARIANCE_CSV_HEADER = [
    "estimator", "tau", "gap", "K", "total_variance",
    "term_a", "term_b", "n_resamples", "seed",
]


def write_variance_csv(path, rows: list[dict]) -> None:
    """Write profiling rows with the fixed header; missing terms are blank."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=VARIANCE_CSV_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row.get(key, "") for key in VARIANCE_CSV_HEADER})


def variance_csv_row(
    cfg: EstimatorConfig, report: VarianceReport, seed
) -> dict:
    return {
        "estimator": estimator_id(cfg),
        "tau": repr(cfg.tau),
        "gap": cfg.gap if isinstance(cfg.gap, str) else repr(float(cfg.gap)),
        "K": cfg.mc_samples,
        "total_variance": repr(report.total_variance),
        "term_a": "" if report.term_a is None else repr(report.term_a),
        "term_b": "" if report.term_b is None else repr(report.term_b),
        "n_resamples": report.n_outer,
        "seed": seed,
    }
