"""Desk-scale categorical VAE benchmark.

An encoder MLP maps 784 pixels to 30 independent categorical posteriors
with 10 categories each; latent one-hot draws go through a configurable
gradient estimator; a decoder MLP maps the 300-dim concatenation back to
784 Bernoulli pixel logits. Training minimizes the negative evidence lower
bound: Bernoulli reconstruction loss plus the closed-form KL from the
encoder posterior to the uniform prior, summed over the 30 variables.

Runs are bitwise reproducible from (seed, config). Divergence (sustained
blow-up or non-finite loss) is recorded as an outcome, not a crash.
"""

from __future__ import annotations

import csv
import math
import os
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    AutodiffError,
    Tape,
    Value,
    add,
    add_bias,
    constant,
    matmul,
    mul,
    relu_plus,
    reshape,
    row_logsumexp_keep,
    softmax_tau,
    softplus,
    sub,
    sum_all,
)
from .estimators import EstimatorConfig, FrozenDraw, SurrogateOutput, estimate, estimator_id
from .samplers import RngStream
from .variance import gradient_variance, surrogate_entropy


class ElboError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    """Constant temperature, or mixed training: every M-th step runs at
    low_temp and all other steps at mid_temp."""

    kind: str = "CONSTANT"
    tau: float = 1.0
    m: int = 20
    mid_temp: float = 0.5
    low_temp: float = 0.1

    def __post_init__(self):
        if self.kind not in ("CONSTANT", "MIXED"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.m < 1:
            raise ConfigError("schedule M must be >= 1")

    def label(self) -> str:
        if self.kind == "CONSTANT":
            return f"CONSTANT({self.tau:g})"
        return f"MIXED({self.m},{self.mid_temp:g},{self.low_temp:g})"


def temperature_schedule(step: int, cfg: ScheduleConfig) -> float:
    if cfg.kind == "CONSTANT":
        return cfg.tau
    return cfg.low_temp if step % cfg.m == 0 else cfg.mid_temp


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "SYNTHETIC"
    path: str | None = None
    n: int = 10000
    pattern_count: int = 10
    seed: int = 0
    binarize: bool = False

    def __post_init__(self):
        if self.kind not in ("SYNTHETIC", "MNIST"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    estimator: EstimatorConfig = EstimatorConfig("GST", tau=0.5, gap=1.0)
    batch_size: int = 100
    epochs: int = 5
    learning_rate: float = 1e-3
    seeds: tuple = (0, 1, 2)
    schedule: ScheduleConfig = ScheduleConfig(kind="CONSTANT", tau=0.5)
    dataset: DatasetConfig = DatasetConfig()
    hidden: int = 256
    n_latents: int = 30
    n_categories: int = 10
    variance_resamples: int = 0
    ablation_temperatures: tuple = (1.0, 0.5)
    divergence_factor: float = 10.0
    divergence_epochs: int = 3

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    mean_neg_elbo: float
    kl_term: float
    reconstruction_term: float
    mean_surrogate_entropy: float
    wall_seconds: float
    gradient_variance: float | None = None


@dataclass
class TrainResult:
    seed: int
    metrics: list
    diverged: bool = False
    divergence_reason: str | None = None
    model: "VaeModel | None" = None
    initial_loss: float | None = None  # untrained-model loss on the first batch

    @property
    def final_neg_elbo(self) -> float:
        return self.metrics[-1].mean_neg_elbo if self.metrics else math.inf

    @property
    def relative_improvement(self) -> float:
        if self.initial_loss is None or not self.metrics:
            return 0.0
        return (self.initial_loss - self.final_neg_elbo) / self.initial_loss


class VaeModel:
    """Two MLPs around a 30x10 categorical bottleneck.

    Weights use the symmetric uniform +-sqrt(6/(fan_in+fan_out)) scheme;
    biases start at zero. Parameter declaration order is fixed and is the
    checkpoint order.
    """

    def __init__(
        self,
        rng: RngStream,
        n_inputs: int = 784,
        hidden: int = 256,
        n_latents: int = 30,
        n_categories: int = 10,
    ):
        self.n_inputs = n_inputs
        self.hidden = hidden
        self.n_latents = n_latents
        self.n_categories = n_categories
        latent_dim = n_latents * n_categories

        def glorot(fan_in, fan_out):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            u = rng.uniform((fan_in, fan_out))
            return Value((2.0 * u - 1.0) * limit)

        self.enc_w1 = glorot(n_inputs, hidden)
        self.enc_b1 = Value(np.zeros(hidden))
        self.enc_w2 = glorot(hidden, latent_dim)
        self.enc_b2 = Value(np.zeros(latent_dim))
        self.dec_w1 = glorot(latent_dim, hidden)
        self.dec_b1 = Value(np.zeros(hidden))
        self.dec_w2 = glorot(hidden, n_inputs)
        self.dec_b2 = Value(np.zeros(n_inputs))

    def parameters(self) -> list:
        return [
            self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2,
            self.dec_w1, self.dec_b1, self.dec_w2, self.dec_b2,
        ]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def encode(self, x: Value) -> Value:
        hidden = relu_plus(add_bias(matmul(x, self.enc_w1), self.enc_b1))
        return add_bias(matmul(hidden, self.enc_w2), self.enc_b2)

    def decode(self, z: Value) -> Value:
        hidden = relu_plus(add_bias(matmul(z, self.dec_w1), self.dec_b1))
        return add_bias(matmul(hidden, self.dec_w2), self.dec_b2)


@dataclass
class ElboTerms:
    loss: Value
    reconstruction: float
    kl: float
    entropy: float
    estimator_output: SurrogateOutput


def elbo_loss(
    model: VaeModel,
    batch: np.ndarray,
    estimator: EstimatorConfig,
    rng: RngStream,
    frozen: FrozenDraw | None = None,
) -> ElboTerms:
    """Mean negative ELBO of a pixel batch in [0, 1].

    Reconstruction is the Bernoulli cross-entropy of the decoder logits
    against the pixel intensities; KL against the uniform prior is
    sum_i p_i (log p_i + log C) per categorical, in closed form.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.n_inputs:
        raise ElboError(f"batch must be (B, {model.n_inputs}), got {batch.shape}")
    if batch.min() < 0.0 or batch.max() > 1.0:
        raise ElboError("pixel values must lie in [0, 1]")
    b = batch.shape[0]
    x = constant(batch)

    enc_logits = model.encode(x)
    flat = reshape(enc_logits, (b * model.n_latents, model.n_categories))
    out = estimate(flat, estimator, rng, frozen=frozen)
    z = reshape(out.output, (b, model.n_latents * model.n_categories))

    try:
        dec_logits = model.decode(z)
        bce = sub(softplus(dec_logits), mul(x, dec_logits))
        recon = mul(sum_all(bce), 1.0 / b)
    except AutodiffError as exc:
        raise ElboError(f"reconstruction term: {exc}") from exc

    try:
        probs = softmax_tau(flat, 1.0)
        log_probs = sub(flat, row_logsumexp_keep(flat))
        kl_elem = mul(probs, add(log_probs, math.log(model.n_categories)))
        kl = mul(sum_all(kl_elem), 1.0 / b)
    except AutodiffError as exc:
        raise ElboError(f"KL term: {exc}") from exc

    kl_value = kl.item()
    kl_max = model.n_latents * math.log(model.n_categories)
    if not -1e-9 <= kl_value <= kl_max + 1e-9:
        raise ElboError(f"KL term {kl_value} outside [0, {kl_max}]")

    loss = add(recon, kl)
    return ElboTerms(
        loss=loss,
        reconstruction=recon.item(),
        kl=kl_value,
        entropy=surrogate_entropy(out),
        estimator_output=out,
    )


class Adam:
    """Adam with bias correction; state holds first/second moments per parameter."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# datasets

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_be32(fh, path, offset):
    raw = fh.read(4)
    if len(raw) != 4:
        raise DatasetError(f"{path}: truncated header at offset {offset}")
    return struct.unpack(">I", raw)[0], offset + 4


def load_idx_images(path) -> np.ndarray:
    """Big-endian IDX image file -> (count, rows*cols) float64 in [0, 1]."""
    with open(path, "rb") as fh:
        offset = 0
        magic, offset = _read_be32(fh, path, offset)
        if magic != IDX_IMAGE_MAGIC:
            raise DatasetError(
                f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count, offset = _read_be32(fh, path, offset)
        rows, offset = _read_be32(fh, path, offset)
        cols, offset = _read_be32(fh, path, offset)
        payload = fh.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise DatasetError(
                f"{path}: truncated pixel data at offset {offset + len(payload)}"
            )
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(count, rows * cols)


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        offset = 0
        magic, offset = _read_be32(fh, path, offset)
        if magic != IDX_LABEL_MAGIC:
            raise DatasetError(
                f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        count, offset = _read_be32(fh, path, offset)
        payload = fh.read(count)
        if len(payload) != count:
            raise DatasetError(
                f"{path}: truncated label data at offset {offset + len(payload)}"
            )
    return np.frombuffer(payload, dtype=np.uint8).copy()


def load_mnist(path) -> tuple[np.ndarray, np.ndarray]:
    """Load (images, labels) from an IDX directory or an images-file path."""
    if os.path.isdir(path):
        images_path = os.path.join(path, "train-images-idx3-ubyte")
        labels_path = os.path.join(path, "train-labels-idx1-ubyte")
    else:
        images_path = path
        labels_path = None
    if not os.path.exists(images_path):
        raise DatasetError(f"no IDX image file at {images_path}")
    images = load_idx_images(images_path)
    labels = (
        load_idx_labels(labels_path)
        if labels_path and os.path.exists(labels_path)
        else np.zeros(images.shape[0], dtype=np.uint8)
    )
    return images, labels


def synth_dataset(n: int, pattern_count: int, rng: RngStream) -> np.ndarray:
    """Binary prototype patterns with pixel flip noise; deterministic per stream."""
    protos = (rng.uniform((pattern_count, 784)) < 0.3).astype(np.float64)
    assignment = np.arange(n) % pattern_count
    flips = rng.uniform((n, 784)) < 0.02
    x = protos[assignment]
    return np.abs(x - flips.astype(np.float64))


def load_dataset(cfg: DatasetConfig) -> np.ndarray:
    if cfg.kind == "SYNTHETIC":
        data = synth_dataset(cfg.n, cfg.pattern_count, RngStream(cfg.seed))
    else:
        root = cfg.path or os.environ.get("GST_DATA_DIR")
        if not root:
            raise DatasetError("MNIST requested but no path given (set GST_DATA_DIR)")
        data, _ = load_mnist(root)
        data = data[: cfg.n]
    if cfg.binarize:
        data = (data > 0.5).astype(np.float64)
    return data


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"GSTVAE01"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: VaeModel) -> None:
    """Versioned flat binary: magic, version, per-tensor element counts,
    then float64 little-endian payloads in parameter declaration order."""
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for p in params:
            fh.write(struct.pack("<Q", p.size))
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, model: VaeModel) -> None:
    params = model.parameters()
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        if count != len(params):
            raise CheckpointError(
                f"{path}: has {count} tensors, model declares {len(params)}"
            )
        sizes = struct.unpack(f"<{count}Q", fh.read(8 * count))
        for p, size in zip(params, sizes):
            if size != p.size:
                raise CheckpointError(
                    f"{path}: tensor size {size} does not match parameter {p.shape}"
                )
        for p in params:
            raw = fh.read(8 * p.size)
            if len(raw) != 8 * p.size:
                raise CheckpointError(f"{path}: truncated payload")
            p.data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(p.shape)


# ---------------------------------------------------------------------------
# training

METRICS_CSV_HEADER = [
    "epoch", "neg_elbo", "kl", "recon", "entropy", "grad_var",
    "seconds", "seed", "estimator", "tau", "gap", "K", "schedule",
]


def vae_gradient_sampler(model: VaeModel, batch: np.ndarray, estimator: EstimatorConfig):
    """(stream) -> flat gradient over all parameters, for variance profiling."""
    def sample(stream: RngStream) -> np.ndarray:
        with Tape() as tape:
            terms = elbo_loss(model, batch, estimator, stream)
            tape.backward(terms.loss)
        return np.concatenate(
            [
                (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
                for p in model.parameters()
            ]
        )

    return sample


def train(cfg: TrainConfig, seed: int, out_dir: str | None = None) -> TrainResult:
    """Run one seed of the training loop; divergence is recorded, not raised."""
    data = load_dataset(cfg.dataset)
    n = data.shape[0]
    if n < cfg.batch_size:
        raise ConfigError(f"dataset of {n} examples smaller than one batch")

    root = RngStream(seed)
    init_stream, shuffle_stream, noise_stream, profile_stream = root.spawn(4)
    model = VaeModel(
        init_stream,
        hidden=cfg.hidden,
        n_latents=cfg.n_latents,
        n_categories=cfg.n_categories,
    )
    optimizer = Adam(model.parameters(), lr=cfg.learning_rate)

    metrics: list[EpochMetrics] = []
    result = TrainResult(seed=seed, metrics=metrics, model=model)
    step = 0
    initial_loss = None
    bad_epochs = 0
    n_batches = n // cfg.batch_size

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_stream.permutation(n)
        loss_sum = kl_sum = recon_sum = entropy_sum = 0.0
        for b in range(n_batches):
            batch = data[order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            tau = temperature_schedule(step, cfg.schedule)
            step_cfg = cfg.estimator.with_tau(tau)
            try:
                with Tape() as tape:
                    terms = elbo_loss(model, batch, step_cfg, noise_stream)
                    tape.backward(terms.loss)
                optimizer.step()
            except (AutodiffError, ElboError) as exc:
                result.diverged = True
                result.divergence_reason = (
                    f"epoch {epoch} batch {b}: non-finite training state ({exc})"
                )
                return result
            if initial_loss is None:
                initial_loss = terms.loss.item()  # untrained-model baseline
                result.initial_loss = initial_loss
            loss_sum += terms.loss.item()
            kl_sum += terms.kl
            recon_sum += terms.reconstruction
            entropy_sum += terms.entropy
            step += 1

        grad_var = None
        if cfg.variance_resamples:
            probe = data[: min(cfg.batch_size, 16)]
            sampler = vae_gradient_sampler(model, probe, cfg.estimator)
            grad_var = gradient_variance(
                sampler, None, None, cfg.variance_resamples, profile_stream
            ).total_variance

        metrics.append(
            EpochMetrics(
                epoch=epoch,
                mean_neg_elbo=loss_sum / n_batches,
                kl_term=kl_sum / n_batches,
                reconstruction_term=recon_sum / n_batches,
                mean_surrogate_entropy=entropy_sum / n_batches,
                wall_seconds=time.perf_counter() - t0,
                gradient_variance=grad_var,
            )
        )

        epoch_loss = metrics[-1].mean_neg_elbo
        if epoch_loss > cfg.divergence_factor * initial_loss:
            bad_epochs += 1
        else:
            bad_epochs = 0
        if bad_epochs >= cfg.divergence_epochs:
            result.diverged = True
            result.divergence_reason = (
                f"loss above {cfg.divergence_factor:g}x the initial level for "
                f"{bad_epochs} consecutive epochs (epoch {epoch})"
            )
            break

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, f"checkpoint_seed{seed}.bin"), model)
    return result


def metrics_csv_rows(result: TrainResult, cfg: TrainConfig) -> list[dict]:
    # the tau column reports the temperature the run is judged at: the
    # constant temperature, or the low temperature of a mixed schedule
    tau = cfg.schedule.tau if cfg.schedule.kind == "CONSTANT" else cfg.schedule.low_temp
    rows = []
    for em in result.metrics:
        rows.append(
            {
                "epoch": em.epoch,
                "neg_elbo": repr(em.mean_neg_elbo),
                "kl": repr(em.kl_term),
                "recon": repr(em.reconstruction_term),
                "entropy": repr(em.mean_surrogate_entropy),
                "grad_var": "" if em.gradient_variance is None else repr(em.gradient_variance),
                "seconds": f"{em.wall_seconds:.3f}",
                "seed": result.seed,
                "estimator": estimator_id(cfg.estimator),
                "tau": f"{tau:g}",
                "gap": cfg.estimator.gap if isinstance(cfg.estimator.gap, str) else f"{float(cfg.estimator.gap):g}",
                "K": cfg.estimator.mc_samples,
                "schedule": cfg.schedule.label(),
            }
        )
    return rows


def write_metrics_csv(path, rows: list[dict], append: bool = False) -> None:
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_CSV_HEADER)
        if mode == "w":
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# flat key = value config files

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def parse_config_text(text: str) -> TrainConfig:
    """Parse `key = value` lines (dotted keys for sections, # comments)."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()

    cfg = TrainConfig()
    est = cfg.estimator
    sched = cfg.schedule
    ds = cfg.dataset
    for key, raw in values.items():
        try:
            if key == "estimator.kind":
                est = replace(est, kind=raw)
            elif key == "estimator.tau":
                est = replace(est, tau=float(raw))
            elif key == "estimator.gap":
                est = replace(est, gap=raw if raw.lower() == "pi" else float(raw))
            elif key == "estimator.K":
                est = replace(est, mc_samples=int(raw))
            elif key == "estimator.mode":
                est = replace(est, mode=raw)
            elif key == "batch_size":
                cfg = replace(cfg, batch_size=int(raw))
            elif key == "epochs":
                cfg = replace(cfg, epochs=int(raw))
            elif key == "learning_rate":
                cfg = replace(cfg, learning_rate=float(raw))
            elif key == "seeds":
                cfg = replace(cfg, seeds=tuple(int(s) for s in raw.split(",") if s.strip()))
            elif key == "hidden":
                cfg = replace(cfg, hidden=int(raw))
            elif key == "variance_resamples":
                cfg = replace(cfg, variance_resamples=int(raw))
            elif key == "schedule.kind":
                sched = replace(sched, kind=raw)
            elif key == "schedule.tau":
                sched = replace(sched, tau=float(raw))
            elif key == "schedule.M":
                sched = replace(sched, m=int(raw))
            elif key == "schedule.mid":
                sched = replace(sched, mid_temp=float(raw))
            elif key == "schedule.low":
                sched = replace(sched, low_temp=float(raw))
            elif key == "dataset.kind":
                ds = replace(ds, kind=raw)
            elif key == "dataset.path":
                ds = replace(ds, path=raw)
            elif key == "dataset.n":
                ds = replace(ds, n=int(raw))
            elif key == "dataset.patterns":
                ds = replace(ds, pattern_count=int(raw))
            elif key == "dataset.seed":
                ds = replace(ds, seed=int(raw))
            elif key == "dataset.binarize":
                ds = replace(ds, binarize=_parse_bool(raw, key))
            elif key == "ablation.temperatures":
                cfg = replace(
                    cfg, ablation_temperatures=tuple(float(s) for s in raw.split(",") if s.strip())
                )
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return replace(cfg, estimator=est, schedule=sched, dataset=ds)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())
