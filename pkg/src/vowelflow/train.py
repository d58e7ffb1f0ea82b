"""Exact maximum-likelihood training for the flow.

The objective is the negative mean log likelihood per dimension
(nats/dim).  Gradients come from the layers' hand-derived backward
passes, are clipped by global norm, and feed an Adam update with bias
correction.  All randomness used by the loop (batch sampling and
dequantization jitter) flows from one counter-based stream whose state
is checkpointed, so a resumed run reproduces a straight run bit for
bit.

Checkpoint files start with the magic "FSCK", a u32 format version and
a length-prefixed JSON header, followed by one tensor record per
parameter and per Adam moment.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowConfig, FlowModel, NonFiniteError, prior_logprob
from .numerics import Rng, read_tensor_from, write_tensor_to

CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,nats_per_dim,bits_per_dim,grad_norm,wall_ms"


class CheckpointError(ValueError):
    """Checkpoint file is malformed or has an unsupported version."""


class DivergenceError(RuntimeError):
    """Training aborted; parameters on disk are the last good checkpoint."""

    def __init__(self, step: int, checkpoint_path: str | None):
        where = checkpoint_path or "no checkpoint written"
        super().__init__(f"training diverged at step {step} ({where})")
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    """Optimization settings; defaults are the desk-scale smoke run."""

    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 50.0
    jitter: float = 1e-2
    seed: int = 0
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("steps, batch_size and checkpoint_every must be >= 1")
        if self.lr <= 0 or self.eps <= 0 or self.clip_norm <= 0:
            raise ValueError("lr, eps and clip_norm must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


# ---------------------------------------------------------------------------
# loss


def nll(model: FlowModel, batch: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative mean log likelihood in nats per dimension.

    Returns the scalar loss and the per-example ln p(x) values."""
    parts, logdet, _ = model.forward(batch)
    z = model.flatten_parts(parts)
    lnp = prior_logprob(z) + logdet
    return -float(np.mean(lnp)) / model.code_size, lnp


def loss_and_grads(
    model: FlowModel, batch: np.ndarray, init_actnorm: bool = False
) -> tuple[float, dict[str, np.ndarray]]:
    """nll plus its exact gradient for every parameter."""
    parts, logdet, cache = model.forward(
        batch, want_cache=True, init_actnorm=init_actnorm
    )
    z = model.flatten_parts(parts)
    lnp = prior_logprob(z) + logdet
    b, d = batch.shape[0], model.code_size
    loss = -float(np.mean(lnp)) / d
    # dloss/dz = z / (B d), dloss/dlogdet = -1 / (B d)
    grad_parts = [p / (b * d) for p in parts]
    grad_logdet = np.full(b, -1.0 / (b * d))
    grads = model.backward(cache, grad_parts, grad_logdet)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> float:
    """Clip by global norm, then update params in place.

    Returns the pre-clip gradient norm (the value logged to metrics).
    """
    norm = global_norm(grads)
    if norm > config.clip_norm:
        scale = config.clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    state.t += 1
    c1 = 1.0 - config.beta1**state.t
    c2 = 1.0 - config.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return norm


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str | os.PathLike,
    model: FlowModel,
    adam: AdamState,
    rng_state: dict,
    step: int,
    train_config: TrainConfig,
    initial_loss: float | None,
    stats: tuple[float, float] | None = None,
) -> None:
    """Write atomically: a temp file in the same directory, then rename.

    `stats` carries the corpus log-magnitude normalization (mean, std)
    so decoded spectrograms can be mapped back to magnitudes without
    the corpus at hand."""
    params = model.params()
    names = list(params)
    meta = {
        "step": step,
        "adam_t": adam.t,
        "rng_state": rng_state,
        "initial_loss": initial_loss,
        "stats": list(stats) if stats is not None else None,
        "flow_config": dataclasses.asdict(model.config),
        "train_config": dataclasses.asdict(train_config),
        "param_names": names,
        "actnorms_initialized": model.actnorms_initialized,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            write_tensor_to(fh, params[name])
        for name in names:
            write_tensor_to(fh, adam.m[name])
        for name in names:
            write_tensor_to(fh, adam.v[name])
    os.replace(tmp, path)


@dataclass
class LoadedCheckpoint:
    model: FlowModel
    adam: AdamState
    rng_state: dict
    step: int
    train_config: TrainConfig
    initial_loss: float | None
    stats: tuple[float, float] | None


def load_checkpoint(path: str | os.PathLike) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (length,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(length).decode("utf-8"))
        flow_config = FlowConfig(
            levels=meta["flow_config"]["levels"],
            depth=meta["flow_config"]["depth"],
            coupling_width=meta["flow_config"]["coupling_width"],
            input_shape=tuple(meta["flow_config"]["input_shape"]),
        )
        model = FlowModel(flow_config)
        names = meta["param_names"]
        model.set_params({name: read_tensor_from(fh) for name in names})
        if meta["actnorms_initialized"]:
            model.mark_actnorms_initialized()
        adam = AdamState(
            m={name: read_tensor_from(fh) for name in names},
            v={name: read_tensor_from(fh) for name in names},
            t=meta["adam_t"],
        )
    stats = meta.get("stats")
    return LoadedCheckpoint(
        model=model,
        adam=adam,
        rng_state=meta["rng_state"],
        step=meta["step"],
        train_config=TrainConfig(**meta["train_config"]),
        initial_loss=meta["initial_loss"],
        stats=tuple(stats) if stats is not None else None,
    )


# ---------------------------------------------------------------------------
# divergence detection


class DivergenceDetector:
    """Flags NaN/Inf at once, or 50 consecutive losses above 10x the first."""

    def __init__(self, factor: float = 10.0, patience: int = 50):
        self.factor = factor
        self.patience = patience
        self.initial: float | None = None
        self.streak = 0

    def update(self, loss: float) -> bool:
        """Feed one loss value; True means training should abort."""
        if not math.isfinite(loss):
            return True
        if self.initial is None:
            self.initial = loss
            return False
        if loss > self.factor * abs(self.initial):
            self.streak += 1
        else:
            self.streak = 0
        return self.streak >= self.patience


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    final_step: int
    final_loss: float
    checkpoint_path: str
    metrics_path: str
    losses: list[float] = field(repr=False, default_factory=list)


def build_model(flow_config: FlowConfig, seed: int) -> FlowModel:
    """Fresh model whose init draws come from a stream reserved for init."""
    return FlowModel(flow_config, rng=Rng(seed).spawn(0))


def train_loop(
    model: FlowModel,
    data: np.ndarray,
    config: TrainConfig,
    out_dir: str | os.PathLike,
    resume: LoadedCheckpoint | None = None,
    stats: tuple[float, float] | None = None,
    comment: str | None = None,
    log=None,
) -> TrainResult:
    """Run config.steps total optimization steps over `data`.

    `data` is a (N, C, H, W) array of normalized spectrogram pixels.
    Each step samples a batch uniformly with replacement and adds
    Gaussian jitter.  Writes `metrics.csv` and a rolling
    `checkpoint.fsck` under `out_dir`; with `resume`, continues from the
    checkpoint's step and appends to the existing metrics file.
    `stats` is embedded in checkpoints; `comment` becomes a `#` line at
    the top of a fresh metrics file.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 4 or data.shape[0] < 1:
        raise ValueError(f"expected a non-empty (N, C, H, W) array, got {data.shape}")
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(os.fspath(out_dir), "metrics.csv")
    ckpt_path = os.path.join(os.fspath(out_dir), "checkpoint.fsck")

    if resume is None:
        rng = Rng(config.seed).spawn(1)
        adam = AdamState.zeros_like(model.params())
        start_step = 0
        detector = DivergenceDetector()
        mode = "w"
    else:
        rng = Rng(config.seed).spawn(1)
        rng.state = resume.rng_state
        adam = resume.adam
        start_step = resume.step
        detector = DivergenceDetector()
        detector.initial = resume.initial_loss
        if stats is None:
            stats = resume.stats
        mode = "a"
        if start_step >= config.steps:
            raise ValueError(
                f"checkpoint is at step {start_step}, nothing left of {config.steps}"
            )

    losses: list[float] = []
    last_ckpt = ckpt_path if resume is not None else None
    with open(metrics_path, mode, encoding="utf-8") as metrics:
        if resume is None:
            if comment:
                metrics.write(f"# {comment}\n")
            metrics.write(METRICS_HEADER + "\n")
        for step in range(start_step + 1, config.steps + 1):
            t0 = time.perf_counter()
            idx = rng.integers(0, data.shape[0], size=config.batch_size)
            batch = data[idx]
            if config.jitter > 0:
                batch = batch + config.jitter * rng.standard_normal(batch.shape)
            try:
                loss, grads = loss_and_grads(
                    model, batch, init_actnorm=not model.actnorms_initialized
                )
            except NonFiniteError:
                loss = math.nan
            if detector.update(loss):
                metrics.flush()
                raise DivergenceError(step, last_ckpt)
            norm = adam_step(model.params(), grads, adam, config)
            wall_ms = (time.perf_counter() - t0) * 1e3
            losses.append(loss)
            metrics.write(
                f"{step},{loss:.17g},{loss / math.log(2.0):.17g},"
                f"{norm:.17g},{wall_ms:.3f}\n"
            )
            if log is not None and (step % 50 == 0 or step == 1):
                log(f"step {step}: {loss:.4f} nats/dim, grad norm {norm:.2f}")
            if step % config.checkpoint_every == 0 or step == config.steps:
                metrics.flush()
                save_checkpoint(
                    ckpt_path, model, adam, rng.state, step, config,
                    detector.initial, stats,
                )
                last_ckpt = ckpt_path
    return TrainResult(
        final_step=config.steps,
        final_loss=losses[-1],
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        losses=losses,
    )


# ---------------------------------------------------------------------------
# gradient audit


@dataclass
class GradAuditEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradAuditReport:
    h: float
    tolerance: float
    entries: list[GradAuditEntry]

    @property
    def max_rel_err(self) -> float:
        return max(e.rel_err for e in self.entries)

    @property
    def worst(self) -> GradAuditEntry:
        return max(self.entries, key=lambda e: e.rel_err)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def group_max(self) -> dict[str, float]:
        """Worst relative error per parameter group."""
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.name] = max(out.get(e.name, 0.0), e.rel_err)
        return out


def grad_audit(
    model: FlowModel,
    batch: np.ndarray,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    entries_per_param: int = 4,
) -> GradAuditReport:
    """Spot-check analytic gradients against central differences.

    Comparisons happen on the summed log-likelihood scale (nll times
    batch size times dimension) so the relative-error floor is not
    dominated by the tiny per-dim gradients.  The report never raises
    on a failed tolerance; callers decide what to do with it.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    batch = np.asarray(batch, dtype=np.float64)
    scale = batch.shape[0] * model.code_size
    _, grads = loss_and_grads(model, batch)
    params = model.params()
    report = GradAuditReport(h=h, tolerance=tolerance, entries=[])
    for name, arr in params.items():
        n = arr.size
        take = min(entries_per_param, n)
        # deterministic, evenly spread flat positions
        flat_positions = np.linspace(0, n - 1, take).round().astype(int)
        flat = arr.reshape(-1)
        for pos in flat_positions:
            keep = flat[pos]
            flat[pos] = keep + h
            lp = nll(model, batch)[0]
            flat[pos] = keep - h
            lm = nll(model, batch)[0]
            flat[pos] = keep
            numeric = (lp - lm) / (2.0 * h) * scale
            analytic = float(grads[name].reshape(-1)[pos]) * scale
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
            idx = tuple(np.unravel_index(pos, arr.shape))
            report.entries.append(GradAuditEntry(name, idx, analytic, numeric, rel))
    return report
