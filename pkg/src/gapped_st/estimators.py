"""Gradient estimators for categorical samples.

All straight-through estimators share one structure: the forward pass
emits a hard one-hot sample drawn from Softmax_1 of the frozen logits,
and the backward pass substitutes a differentiable surrogate

    h = Softmax_tau(logits + perturbation)

where the perturbation carries zero gradient. The estimators differ only
in the perturbation:

* ST        -- no perturbation; surrogate is Softmax_1 of the logits, so
               its argmax need not agree with the drawn sample.
* STGS      -- the Gumbel vector that produced the sample (shared
               randomness).
* GR-MCK    -- average of K fresh conditional Gumbel draws given the
               sample (Rao-Blackwellized STGS; K=1 matches STGS in
               distribution).
* GST       -- deterministic given the sample: m1 lifts the selected
               logit to the row maximum, m2 lowers every other logit far
               enough to leave a gap of at least g below it.
* NZ-GST    -- ablation of GST in which m1/m2 are computed from the live
               logits and therefore leak gradient.

REINFORCE is the score-function baseline and produces gradient samples
directly rather than a differentiable output.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (
    Value,
    add,
    constant,
    group_mean_rows,
    mul,
    relu_plus,
    repeat_rows,
    reshape,
    row_max_keep,
    row_sum_keep,
    softmax_tau,
    straight_through,
    sub,
)
from .samplers import (
    OneHotSample,
    RngStream,
    conditional_perturbed_logits_rows,
    exponential_from_uniform,
    gumbel_from_uniform,
    gumbel_max_rows,
    onehot_rows,
)

KINDS = ("REINFORCE", "ST_NAIVE", "STGS", "GR_MCK", "GST", "NZ_GST")
PI_GAP = "pi"

# clamp for the per-sample gap -log(1-p)/p, which diverges as p -> 1
_PI_CLAMP = (1e-6, 1.0 - 1e-6)


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimator to run and with what knobs.

    gap is either a constant g >= 0 or the marker "pi", which sets g per
    sample to -log(1 - p_i)/p_i for the drawn category i. mc_samples is
    only consumed by GR_MCK.
    """

    kind: str
    tau: float = 1.0
    gap: float | str = 1.0
    mc_samples: int = 1
    mode: str = "hard"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EstimatorError(f"unknown estimator kind {self.kind!r}")
        if not self.tau > 0.0:
            raise EstimatorError(f"tau must be positive, got {self.tau}")
        if isinstance(self.gap, str):
            if self.gap.lower() != PI_GAP:
                raise EstimatorError(f"gap must be a number >= 0 or 'pi', got {self.gap!r}")
            object.__setattr__(self, "gap", PI_GAP)
        elif self.gap < 0.0:
            raise EstimatorError(f"gap must be >= 0, got {self.gap}")
        if self.mc_samples < 1:
            raise EstimatorError(f"mc_samples must be >= 1, got {self.mc_samples}")
        mode = self.mode.lower()
        if mode not in ("hard", "soft"):
            raise EstimatorError(f"mode must be 'hard' or 'soft', got {self.mode!r}")
        object.__setattr__(self, "mode", mode)

    @property
    def hard(self) -> bool:
        return self.mode == "hard"

    def with_tau(self, tau: float) -> "EstimatorConfig":
        return replace(self, tau=tau)


def estimator_id(cfg: EstimatorConfig) -> str:
    """Short label used in tables and CSV rows, e.g. GST-1.0 or GR-MC100."""
    if cfg.kind == "ST_NAIVE":
        return "ST"
    if cfg.kind == "STGS":
        return "STGS"
    if cfg.kind == "GR_MCK":
        return f"GR-MC{cfg.mc_samples}"
    if cfg.gap == PI_GAP:
        gap = "pi"
    else:
        g = float(cfg.gap)
        gap = f"{g:.1f}" if g == int(g) else f"{g:g}"
    prefix = "NZ-GST" if cfg.kind == "NZ_GST" else "GST"
    return f"{prefix}-{gap}"


@dataclass
class FrozenDraw:
    """Realized randomness of one estimator call, for replay or conditioning.

    index/onehot pin the drawn categories (batch form: (M,) and (M, N)).
    noise pins the zero-gradient logit offset actually used; None means
    "redraw it conditionally given the pinned sample", which is how the
    conditional variance machinery resamples.
    """

    index: np.ndarray
    onehot: np.ndarray
    noise: np.ndarray | None = None


@dataclass
class SurrogateOutput:
    """Result of one estimator call.

    output is the straight-through value (hard mode: forward equals the
    one-hot sample bit-for-bit) or the soft surrogate itself.
    surrogate_probs is h, a point in the probability simplex, kept for
    entropy logging. draw records the realized randomness.
    """

    sample: OneHotSample
    output: Value
    surrogate_probs: Value
    draw: FrozenDraw


def _softmax_rows(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = (logits - logits.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def straight_through_combine(hard, h: Value) -> Value:
    """hard - stop_grad(h) + h: forward is the hard sample, backward is h's."""
    oh = hard.onehot if isinstance(hard, OneHotSample) else hard
    return straight_through(oh, h)


def compute_m1(logits0: np.ndarray, d) -> np.ndarray:
    """Lift the selected logit to the row maximum: (max_j l_j - <l, D>) * D."""
    l0 = np.asarray(logits0, dtype=np.float64)
    oh = d.onehot if isinstance(d, OneHotSample) else np.asarray(d, dtype=np.float64)
    if l0.shape != oh.shape:
        raise EstimatorError(f"compute_m1: shape mismatch {l0.shape} vs {oh.shape}")
    row_max = l0.max(axis=-1, keepdims=True)
    selected = (l0 * oh).sum(axis=-1, keepdims=True)
    return (row_max - selected) * oh


def compute_m2(logits0: np.ndarray, d, g) -> np.ndarray:
    """Lower unselected logits to at least g below the row maximum.

    (l + g - max_j l_j)+ elementwise-times (1 - D); entries are >= 0 and
    zero at the selected index. g may be a scalar or a per-row column.
    """
    l0 = np.asarray(logits0, dtype=np.float64)
    oh = d.onehot if isinstance(d, OneHotSample) else np.asarray(d, dtype=np.float64)
    if l0.shape != oh.shape:
        raise EstimatorError(f"compute_m2: shape mismatch {l0.shape} vs {oh.shape}")
    if np.any(np.asarray(g) < 0.0):
        raise EstimatorError("compute_m2: gap must be >= 0")
    row_max = l0.max(axis=-1, keepdims=True)
    return np.maximum((l0 + g) - row_max, 0.0) * (1.0 - oh)


def _resolve_gap(cfg: EstimatorConfig, l0: np.ndarray, index: np.ndarray):
    """Constant gap, or the per-sample closed-form expected gap for 'pi'."""
    if cfg.gap != PI_GAP:
        return float(cfg.gap)
    p = _softmax_rows(l0)
    p_sel = p[np.arange(l0.shape[0]), index]
    p_sel = np.clip(p_sel, *_PI_CLAMP)
    return (-np.log1p(-p_sel) / p_sel)[:, None]


def _draw_category(l0, rng, frozen):
    """Sample (index, onehot) by Gumbel-Max, or reuse a pinned draw.

    Also returns the Gumbel perturbation when it was actually drawn, so
    STGS can share randomness with the sample.
    """
    if frozen is not None:
        return np.asarray(frozen.index), np.asarray(frozen.onehot, dtype=np.float64), None
    index, onehot, perturbed = gumbel_max_rows(l0, rng)
    return index, onehot, perturbed


def _finalize(cfg, logits2, was_1d, sample_index, sample_onehot, h, noise):
    out = straight_through(sample_onehot, h) if cfg.hard else h
    if was_1d:
        n = logits2.shape[1]
        out = reshape(out, (n,))
        h = reshape(h, (n,))
        sample = OneHotSample(int(sample_index[0]), sample_onehot[0])
    else:
        sample = OneHotSample(sample_index, sample_onehot)
    return SurrogateOutput(
        sample=sample,
        output=out,
        surrogate_probs=h,
        draw=FrozenDraw(sample_index, sample_onehot, noise),
    )


def estimate(
    logits: Value,
    cfg: EstimatorConfig,
    rng: RngStream | None = None,
    frozen: FrozenDraw | None = None,
) -> SurrogateOutput:
    """Run one estimator forward pass on a (N,) or (M, N) logit value.

    Rows of a batch are treated independently, with row-major randomness so
    each row's draw does not depend on the batch size. `frozen` replays a
    previous draw: with noise it reproduces the call bitwise, without noise
    it keeps the sampled categories and redraws the conditional noise.
    """
    if cfg.kind == "REINFORCE":
        raise EstimatorError("REINFORCE produces gradient samples; use reinforce_grad")
    was_1d = logits.data.ndim == 1
    n = logits.data.shape[-1]
    logits2 = reshape(logits, (1, n)) if was_1d else logits
    l0 = logits2.data
    m = l0.shape[0]

    if cfg.kind == "ST_NAIVE":
        index, onehot, _ = _draw_category(l0, rng, frozen)
        h = softmax_tau(logits2, 1.0)
        return _finalize(cfg, logits2, was_1d, index, onehot, h, None)

    if cfg.kind == "STGS":
        if frozen is not None and frozen.noise is not None:
            index, onehot, gumbel = frozen.index, frozen.onehot, frozen.noise
        elif frozen is not None:
            index, onehot = frozen.index, np.asarray(frozen.onehot, dtype=np.float64)
            cond = conditional_perturbed_logits_rows(l0, index, rng, k=1)[:, 0, :]
            gumbel = cond - l0
        else:
            index, onehot, perturbed = gumbel_max_rows(l0, rng)
            gumbel = perturbed - l0
        h = softmax_tau(add(logits2, constant(gumbel)), cfg.tau)
        return _finalize(cfg, logits2, was_1d, index, onehot, h, gumbel)

    if cfg.kind == "GR_MCK":
        k = cfg.mc_samples
        if frozen is not None and frozen.noise is not None:
            index, onehot, noises = frozen.index, frozen.onehot, frozen.noise
        elif frozen is not None:
            index, onehot = frozen.index, np.asarray(frozen.onehot, dtype=np.float64)
            cond = conditional_perturbed_logits_rows(l0, index, rng, k=k)
            noises = cond - l0[:, None, :]
        else:
            # one block draw per row so batch size cannot shift a row's stream
            u = rng.uniform((m, k + 1, n))
            index, onehot, _ = gumbel_max_rows(l0, rng, gumbels=gumbel_from_uniform(u[:, 0, :]))
            cond = conditional_perturbed_logits_rows(
                l0, index, exponentials=exponential_from_uniform(u[:, 1:, :])
            )
            noises = cond - l0[:, None, :]
        h_all = softmax_tau(
            add(repeat_rows(logits2, k), constant(noises.reshape(m * k, n))), cfg.tau
        )
        h = group_mean_rows(h_all, k)
        return _finalize(cfg, logits2, was_1d, index, onehot, h, noises)

    if cfg.kind == "GST":
        index, onehot, _ = _draw_category(l0, rng, frozen)
        if frozen is not None and frozen.noise is not None:
            pert = frozen.noise
        else:
            g = _resolve_gap(cfg, l0, index)
            pert = compute_m1(l0, onehot) - compute_m2(l0, onehot, g)
        h = softmax_tau(add(logits2, constant(pert)), cfg.tau)
        return _finalize(cfg, logits2, was_1d, index, onehot, h, pert)

    if cfg.kind == "NZ_GST":
        index, onehot, _ = _draw_category(l0, rng, frozen)
        g = _resolve_gap(cfg, l0, index)
        g_full = constant(np.broadcast_to(np.asarray(g, dtype=np.float64), l0.shape).copy())
        d_const = constant(onehot)
        row_max = row_max_keep(logits2)
        selected = row_sum_keep(mul(logits2, d_const))
        m1_live = mul(sub(row_max, selected), d_const)
        m2_live = mul(
            relu_plus(sub(add(logits2, g_full), row_max)), constant(1.0 - onehot)
        )
        h = softmax_tau(add(logits2, sub(m1_live, m2_live)), cfg.tau)
        pert = compute_m1(l0, onehot) - compute_m2(l0, onehot, g)
        return _finalize(cfg, logits2, was_1d, index, onehot, h, pert)

    raise EstimatorError(f"unhandled estimator kind {cfg.kind!r}")


def st_naive(logits: Value, cfg: EstimatorConfig, rng: RngStream) -> SurrogateOutput:
    return estimate(logits, replace(cfg, kind="ST_NAIVE"), rng)


def stgs(logits: Value, cfg: EstimatorConfig, rng: RngStream) -> SurrogateOutput:
    return estimate(logits, replace(cfg, kind="STGS"), rng)


def gr_mck(logits: Value, cfg: EstimatorConfig, rng: RngStream) -> SurrogateOutput:
    return estimate(logits, replace(cfg, kind="GR_MCK"), rng)


def gst(logits: Value, cfg: EstimatorConfig, rng: RngStream) -> SurrogateOutput:
    return estimate(logits, replace(cfg, kind="GST"), rng)


def nz_gst(logits: Value, cfg: EstimatorConfig, rng: RngStream) -> SurrogateOutput:
    return estimate(logits, replace(cfg, kind="NZ_GST"), rng)


@dataclass
class GradientBatch:
    """R resampled gradient vectors for one estimator at a frozen state."""

    samples: np.ndarray  # (R, P)
    estimator_id: str
    seed: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 2:
            raise EstimatorError("GradientBatch needs at least 2 sample rows")
        if not np.all(np.isfinite(self.samples)):
            raise EstimatorError("GradientBatch contains non-finite entries")


def reinforce_grad(
    logits,
    loss_per_category,
    rng: RngStream,
    n_samples: int,
    seed: int | None = None,
) -> GradientBatch:
    """Score-function gradient samples: grad log p(D) * g(D), D ~ Softmax_1.

    Unbiased for the gradient of E[g(D)] with respect to the logits; each
    row of the batch is one independent draw.
    """
    l0 = logits.data if isinstance(logits, Value) else np.asarray(logits, dtype=np.float64)
    if l0.ndim != 1:
        raise EstimatorError("reinforce_grad expects a single logit vector")
    n = l0.size
    g_values = np.asarray(
        [float(loss_per_category(np.eye(n)[i])) for i in range(n)], dtype=np.float64
    )
    index, onehot, _ = gumbel_max_rows(np.broadcast_to(l0, (n_samples, n)), rng)
    p = _softmax_rows(l0)
    samples = g_values[index][:, None] * (onehot - p[None, :])
    return GradientBatch(samples, "REINFORCE", seed)
