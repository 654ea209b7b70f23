"""Exact sampling for Gumbel, exponential, and perturbed-logit draws.

Includes the Gumbel-Max categorical draw and the conditional
perturbed-logit construction: given that category i won the perturbed
argmax, the perturbed vector is distributed as

    entry i:      -log(E_i / Z)
    entry j != i: -log(E_j / e^{l_j} + E_i / Z)

with E_k i.i.d. Exp(1) and Z the partition function sum_j e^{l_j}. A
rejection sampler over unconditioned Gumbel-Max draws is kept as an
independent oracle for the conditional construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

# Uniform draws are clamped away from {0, 1} before taking logs; this is
# the only distributional approximation in the sampling layer.
EPS_UNIFORM = 1e-12


class SamplingError(RuntimeError):
    pass


class RngStream:
    """Deterministic stream of randomness (PCG64 behind a SeedSequence).

    The same seed always yields the same sequence for the same call order.
    ``spawn`` derives statistically independent child streams for separate
    sampling contexts; a stream itself is single-owner (not thread-safe).
    """

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def seed(self):
        return self._seq.entropy

    def uniform(self, shape) -> np.ndarray:
        """Open-interval uniforms, clamped to [EPS_UNIFORM, 1 - EPS_UNIFORM]."""
        u = self._gen.random(size=shape)
        return np.clip(u, EPS_UNIFORM, 1.0 - EPS_UNIFORM)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, n: int) -> list["RngStream"]:
        return [RngStream(seq) for seq in self._seq.spawn(n)]


@dataclass
class OneHotSample:
    """A drawn category: integer index plus its one-hot vector.

    Batched samples hold an index array of shape (M,) and a one-hot matrix
    of shape (M, N); single samples hold a plain int and a length-N vector.
    """

    index: int | np.ndarray
    onehot: np.ndarray

    def __post_init__(self):
        oh = np.asarray(self.onehot, dtype=np.float64)
        idx = np.asarray(self.index)
        if oh.ndim == 1:
            if oh[int(idx)] != 1.0 or oh.sum() != 1.0:
                raise SamplingError("onehot does not encode the stated index")
        else:
            rows = np.arange(oh.shape[0])
            if not (np.all(oh[rows, idx] == 1.0) and np.all(oh.sum(axis=1) == 1.0)):
                raise SamplingError("onehot rows do not encode the stated indices")
        self.onehot = oh

    @property
    def n_categories(self) -> int:
        return self.onehot.shape[-1]


@dataclass
class PerturbedLogits:
    """Logits plus noise, together with the argmax index (lowest index on ties)."""

    values: np.ndarray
    argmax_index: int | np.ndarray


def _check_logits(logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise SamplingError("logits must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise SamplingError("logits must be finite")
    return arr


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


def exponential_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(u)


def sample_gumbel(rng: RngStream, n) -> np.ndarray:
    """i.i.d. Gumbel(0,1) draws: -log(-log(U))."""
    return gumbel_from_uniform(rng.uniform(n))


def sample_exponential(rng: RngStream, n) -> np.ndarray:
    """i.i.d. Exp(1) draws: -log(U)."""
    return exponential_from_uniform(rng.uniform(n))


def onehot_rows(index: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((index.shape[0], n))
    out[np.arange(index.shape[0]), index] = 1.0
    return out


def gumbel_max_rows(logits: np.ndarray, rng: RngStream, gumbels: np.ndarray | None = None):
    """Row-wise Gumbel-Max draw on an (M, N) logit matrix.

    Returns (index (M,), onehot (M, N), perturbed (M, N)). Rows consume the
    stream in row-major order, so a row's draw does not depend on how many
    rows follow it.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if gumbels is None:
        gumbels = sample_gumbel(rng, logits.shape)
    perturbed = logits + gumbels
    index = np.argmax(perturbed, axis=1)
    return index, onehot_rows(index, logits.shape[1]), perturbed


def gumbel_max(logits, rng: RngStream) -> tuple[OneHotSample, PerturbedLogits]:
    """Draw a category as argmax of logits + Gumbel noise.

    The index is marginally distributed as Softmax_1(logits); ties (measure
    zero) break toward the lowest index.
    """
    arr = _check_logits(logits)
    idx, onehot, perturbed = gumbel_max_rows(arr[None, :], rng)
    return (
        OneHotSample(int(idx[0]), onehot[0]),
        PerturbedLogits(perturbed[0], int(idx[0])),
    )


def conditional_perturbed_logits_rows(
    logits: np.ndarray,
    index: np.ndarray,
    rng: RngStream | None = None,
    k: int = 1,
    exponentials: np.ndarray | None = None,
) -> np.ndarray:
    """k conditional perturbed-logit draws per row, given each row's winner.

    Returns an (M, k, N) array distributed as logits + Gumbel conditioned on
    the argmax equalling `index`, row by row. Pre-drawn Exp(1) variates of
    shape (M, k, N) may be supplied instead of a stream.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    m, n = logits.shape
    index = np.asarray(index)
    if exponentials is None:
        exponentials = sample_exponential(rng, (m, k, n))
    log_e = np.log(exponentials)
    log_z = logsumexp(logits, axis=1)

    idx_grid = np.broadcast_to(index[:, None, None], (m, k, 1))
    sel_log_e = np.take_along_axis(log_e, idx_grid, axis=2)
    # unselected entries: -log(E_j / e^{l_j} + E_i / Z), done in log space
    unsel = -np.logaddexp(log_e - logits[:, None, :], sel_log_e - log_z[:, None, None])
    np.put_along_axis(unsel, idx_grid, log_z[:, None, None] - sel_log_e, axis=2)
    return unsel


def conditional_perturbed_logits(
    logits, given: OneHotSample, rng: RngStream
) -> PerturbedLogits:
    """One conditional perturbed-logit draw given the selected category."""
    arr = _check_logits(logits)
    if not 0 <= int(given.index) < arr.size:
        raise SamplingError(f"conditioning index {given.index} out of range")
    vals = conditional_perturbed_logits_rows(
        arr[None, :], np.asarray([int(given.index)]), rng, k=1
    )[0, 0]
    return PerturbedLogits(vals, int(given.index))


def rejection_sample_rows(
    logits: np.ndarray,
    index: int,
    rng: RngStream,
    n_samples: int,
    max_proposals: int,
    chunk: int = 65536,
) -> np.ndarray:
    """Exact conditional samples by rejection: redraw until argmax == index.

    Returns an (n_samples, N) array; raises if max_proposals is exhausted
    first (the conditioning probability is then too small for rejection).
    """
    arr = _check_logits(logits)
    accepted = []
    got = 0
    proposed = 0
    while got < n_samples:
        if proposed >= max_proposals:
            raise SamplingError(
                f"rejection sampler exhausted {max_proposals} proposals with "
                f"{got}/{n_samples} accepted; conditional probability too small"
            )
        take = min(chunk, max_proposals - proposed)
        idx, _, perturbed = gumbel_max_rows(
            np.broadcast_to(arr, (take, arr.size)), rng
        )
        proposed += take
        hits = perturbed[idx == index]
        if hits.shape[0]:
            accepted.append(hits[: n_samples - got])
            got += min(hits.shape[0], n_samples - got)
    return np.concatenate(accepted, axis=0)


def rejection_oracle(
    logits, given: OneHotSample, rng: RngStream, max_tries: int
) -> PerturbedLogits:
    """Ground-truth conditional draw by rejection (oracle for the closed form)."""
    vals = rejection_sample_rows(
        logits, int(given.index), rng, n_samples=1, max_proposals=max_tries, chunk=min(max_tries, 4096)
    )[0]
    return PerturbedLogits(vals, int(given.index))
