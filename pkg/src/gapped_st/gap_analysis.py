"""Expected top-2 gap of Gumbel-perturbed logits, conditioned on the winner.

Conditioned on category i winning the perturbed argmax, the expected gap
between the two largest entries of logits + Gumbel has the closed form

    gap(i) = -log(1 - p_i) / p_i,        p = Softmax_1(logits),

which is always >= 1 and approaches l_i - s from above as the selected
logit dominates (s is the log-sum-exp of the unselected logits). The same
quantity can be reached through a logistic variable: the difference of two
independent Gumbels is Logistic(0,1), and the gap is its conditional mean
overshoot above d = s - l_i. Both routes are implemented and must agree;
Monte Carlo estimators (conditional construction, plus plain rejection as
an independent oracle) cross-check them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .samplers import RngStream, conditional_perturbed_logits_rows


class GapError(ValueError):
    pass


# below this selected probability the closed form is the analytic limit 1
_P_TINY = 1e-12


@dataclass
class GapReport:
    """Closed-form and Monte-Carlo gap estimates for one (logits, index) case."""

    analytic_gap: float
    mc_gap: float
    mc_stderr: float
    n_samples: int
    conditioning_index: int
    logits: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.analytic_gap < 1.0 - 1e-12:
            raise GapError(f"analytic gap {self.analytic_gap} below its lower bound 1")
        if self.n_samples > 1 and not self.mc_stderr > 0.0:
            raise GapError("mc_stderr must be positive for n_samples > 1")

    @property
    def z_score(self) -> float:
        return (self.mc_gap - self.analytic_gap) / self.mc_stderr

    def agrees(self, n_stderr: float = 3.0) -> bool:
        return abs(self.mc_gap - self.analytic_gap) < n_stderr * self.mc_stderr


def _check(logits, index: int) -> tuple[np.ndarray, int]:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1:
        raise GapError("logits must be a 1-D vector")
    if arr.size < 2:
        raise GapError("gap is undefined for a single category")
    if not np.all(np.isfinite(arr)):
        raise GapError("logits must be finite")
    index = int(index)
    if not 0 <= index < arr.size:
        raise GapError(f"index {index} out of range for {arr.size} categories")
    return arr, index


def selected_probability(logits, index: int) -> float:
    arr, index = _check(logits, index)
    return float(np.exp(arr[index] - logsumexp(arr)))


def gap_closed_form(logits, index: int) -> float:
    """-log(1 - p_i) / p_i via log1p; returns the limit 1 for vanishing p_i."""
    p = selected_probability(logits, index)
    if p < _P_TINY:
        return 1.0
    if p >= 1.0:
        raise GapError("selected probability is numerically 1; gap diverges")
    return float(-np.log1p(-p) / p)


def gap_logistic_form(logits, index: int) -> float:
    """Same gap through the logistic route.

    With s the log-sum-exp of the unselected logits and d = s - l_i, the
    gap equals log(1 + e^{-d}) / (1 - 1/(1 + e^{-d})). The denominator is
    the selected probability, so the limit and error behavior mirror
    gap_closed_form exactly.
    """
    arr, index = _check(logits, index)
    s = logsumexp(np.delete(arr, index))
    d = s - arr[index]
    denom = expit(-d)
    if denom < _P_TINY:
        return 1.0
    if denom >= 1.0:
        raise GapError("selected probability is numerically 1; gap diverges")
    return float(np.logaddexp(0.0, -d) / denom)


def _top2_gap_given(values: np.ndarray, index: int) -> np.ndarray:
    """Per-row selected entry minus the best unselected entry."""
    others = values.copy()
    others[:, index] = -np.inf
    return values[:, index] - others.max(axis=1)


def gap_monte_carlo(
    logits,
    index: int,
    rng: RngStream,
    n: int,
    method: str = "conditional",
    chunk: int = 1 << 16,
) -> GapReport:
    """Monte-Carlo estimate of the conditional expected top-2 gap.

    method="conditional" draws n conditional perturbed-logit vectors (the
    default); method="rejection" spends n unconditioned Gumbel-Max draws
    and keeps those whose argmax is `index`, erroring below 100 accepted
    draws. Draws stream through in chunks so n can be large.
    """
    arr, index = _check(logits, index)
    if n < 1000:
        raise GapError("need at least 1e3 draws for a meaningful estimate")
    if method not in ("conditional", "rejection"):
        raise GapError(f"unknown method {method!r}")

    total = 0.0
    total_sq = 0.0
    count = 0
    if method == "conditional":
        remaining = n
        while remaining > 0:
            take = min(chunk, remaining)
            vals = conditional_perturbed_logits_rows(
                arr[None, :], np.asarray([index]), rng, k=take
            )[0]
            gaps = _top2_gap_given(vals, index)
            total += gaps.sum()
            total_sq += (gaps * gaps).sum()
            count += take
            remaining -= take
    else:
        proposed = 0
        while proposed < n:
            take = min(chunk, n - proposed)
            u = rng.uniform((take, arr.size))
            perturbed = arr + (-np.log(-np.log(u)))
            hit = perturbed[np.argmax(perturbed, axis=1) == index]
            proposed += take
            if hit.shape[0]:
                gaps = _top2_gap_given(hit, index)
                total += gaps.sum()
                total_sq += (gaps * gaps).sum()
                count += hit.shape[0]
        if count < 100:
            raise GapError(
                f"rejection kept only {count} of {n} draws; conditioning "
                "probability too small for the rejection path"
            )

    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0) * count / max(count - 1, 1)
    stderr = float(np.sqrt(var / count))
    return GapReport(
        analytic_gap=gap_closed_form(arr, index),
        mc_gap=float(mean),
        mc_stderr=stderr,
        n_samples=count,
        conditioning_index=index,
        logits=arr.copy(),
    )


def rejection_gap_reference(logits, index, rng, n) -> GapReport:
    """Rejection-path report, kept as the independent oracle."""
    return gap_monte_carlo(logits, index, rng, n, method="rejection")
