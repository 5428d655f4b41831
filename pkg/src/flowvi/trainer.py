"""Optimization loop: Adam, warmup/decay, clipping, CAAT phases, early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import ConfigError, NumericError, TrainingAborted
from flowvi.model import Batch, SumModel, forward, posterior
from flowvi.objective import cross_entropy, token_accuracy, token_nll_mean, total_loss, vi_loss

log = logging.getLogger(__name__)

STRATEGIES = ("standard", "beta_c", "caat")
PHASES = ("agg_psi", "agg_all", "joint")
STEPLOG_COLUMNS = ("step", "phase", "lr", "ce", "vi", "vi_transformed", "total", "grad_norm_pre_clip")


@dataclass
class TrainConfig:
    strategy: str = "standard"
    beta: float = 1.0
    C: float = 0.1
    n_agg: int = 0
    n_alt: int = 15
    n_max: int = 1000
    lr: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.1
    clip_norm: float = 1.0
    eval_interval: int = 50
    patience: int = 8
    seed: int = 0
    batch_size: int = 8
    collapse_window: int = 50
    collapse_threshold: float = 0.02

    def validate(self) -> "TrainConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.n_alt < 1:
            raise ConfigError(f"n_alt must be >= 1, got {self.n_alt}")
        if not 0 <= self.n_agg <= self.n_max:
            raise ConfigError(f"need 0 <= n_agg <= n_max, got n_agg={self.n_agg}, n_max={self.n_max}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.beta < 0 or self.C < 0:
            raise ConfigError("beta and C must be non-negative")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError(f"warmup_frac must lie in [0, 1], got {self.warmup_frac}")
        if self.clip_norm <= 0 or self.lr < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("clip_norm, batch_size and eval_interval must be positive, lr non-negative")
        return self

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.n_max))


def epochs_to_steps(epochs: float, n_examples: int, batch_size: int) -> int:
    """The training loop counts steps; schedules quoted in epochs convert through this."""
    return int(math.ceil(epochs * math.ceil(n_examples / batch_size)))


# --- parameter partition ----------------------------------------------------

@dataclass
class ParamPartition:
    psi: list[str]    # variational: inference net + flows
    theta: list[str]  # encoder, decoder, embeddings, gate, LM head

    @classmethod
    def from_model(cls, model: SumModel) -> "ParamPartition":
        names = [n for n, _ in model.named_parameters()]
        psi = [n for n in names if n.startswith(SumModel.VARIATIONAL_PREFIXES)]
        theta = [n for n in names if n not in set(psi)]
        part = cls(psi, theta)
        assert not set(psi) & set(theta) and set(psi) | set(theta) == set(names)
        return part


def theta_checksum(model: SumModel, part: ParamPartition) -> bytes:
    params = dict(model.named_parameters())
    return b"".join(params[n].data.tobytes() for n in part.theta)


# --- Adam, schedule, clipping --------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)  # per-parameter step counters


def adam_step(params: dict[str, nc.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam on the parameters named in ``grads``. A non-finite
    gradient aborts before any parameter is touched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {name!r}", param=name)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        t = state.t.get(name, 0) + 1
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name], state.v[name], state.t[name] = m, v, t
    return state


def lr_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear 0 -> base_lr over warmup, then linear base_lr -> 0 at total_steps."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    return base_lr * max(0.0, (total_steps - step) / (total_steps - warmup_steps))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the
    clipped grads and the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# --- logs, early stopping, collapse -------------------------------------------

@dataclass
class StepLog:
    step: int
    phase: str
    lr: float
    ce: float
    vi: float
    vi_transformed: float
    total: float
    grad_norm_pre_clip: float

    @property
    def kl_estimate(self) -> float:
        return self.vi


def write_steplog_csv(logs: list[StepLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEPLOG_COLUMNS)
        for rec in logs:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in asdict(rec).values()])


def read_steplog_csv(path) -> list[StepLog]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    types = {f.name: f.type for f in fields(StepLog)}
    conv = {"int": int, "str": str, "float": float}
    return [StepLog(**{k: conv[types[k]](v) for k, v in row.items()}) for row in rows]


def early_stop_check(ppl_history: list[float], patience: int) -> bool:
    """True iff the last ``patience`` evals all fail to beat the best before them."""
    if len(ppl_history) <= patience:
        return False
    best_before = min(ppl_history[:-patience])
    return min(ppl_history[-patience:]) >= best_before


@dataclass
class CollapseReport:
    collapsed: bool
    final_window_mean: float
    threshold: float
    window: int
    first_collapse_step: int | None


def collapse_monitor(step_logs: list[StepLog], window: int = 50, threshold: float = 0.02) -> CollapseReport:
    """Moving-window mean of the per-step KL estimate; collapsed when the
    final window sits below ``threshold``."""
    if not step_logs:
        raise ValueError("collapse_monitor needs at least one step log")
    kl = np.array([rec.kl_estimate for rec in step_logs])
    w = min(window, kl.size)
    moving = np.convolve(kl, np.ones(w) / w, mode="valid")
    below = np.flatnonzero(moving < threshold)
    first = int(step_logs[below[0] + w - 1].step) if below.size else None
    final = float(moving[-1])
    return CollapseReport(final < threshold, final, threshold, w, first)


# --- data -----------------------------------------------------------------------

def batch_stream(data: Batch, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """Endless minibatches, reshuffled each epoch."""
    n = len(data)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield data.subset(order[start:start + batch_size])


# --- evaluation -----------------------------------------------------------------

@dataclass
class EvalPoint:
    step: int
    nll: float
    ppl: float
    accuracy: float


def evaluate_lm(model: SumModel, data: Batch, batch_size: int = 32) -> tuple[float, float]:
    """Teacher-forced per-token NLL and token accuracy with the latent at its
    deterministic transport (eps = 0)."""
    was = model.training
    model.eval()
    nll_sum = correct = count = 0.0
    try:
        with nc.no_grad():
            for s in range(0, len(data), batch_size):
                b = data.subset(slice(s, s + batch_size))
                logits = forward(model, b, posterior(model, b, deterministic=True))
                n_tok = b.tgt_mask.sum()
                nll_sum += token_nll_mean(logits, b.tgt_out, b.tgt_mask) * n_tok
                correct += token_accuracy(logits, b.tgt_out, b.tgt_mask) * n_tok
                count += n_tok
    finally:
        model.train(was)
    return float(nll_sum / count), float(correct / count)


# --- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    logs: list[StepLog]
    evals: list[EvalPoint]
    stopped_early: bool
    steps_run: int


def phase_for(step: int, cfg: TrainConfig) -> str:
    if cfg.strategy == "caat" and step <= cfg.n_agg:
        return "agg_all" if step % cfg.n_alt == 0 else "agg_psi"
    return "joint"


def train(model: SumModel, data: Batch, cfg: TrainConfig, val: Batch | None = None,
          on_step: Callable[[StepLog, SumModel], None] | None = None) -> TrainResult:
    """Run ``cfg.n_max`` steps of the configured strategy.

    CAAT: steps ``1..n_agg`` update psi only, except every ``n_alt``-th step
    which updates everything; steps ``n_agg+1..n_max`` are joint with early
    stopping. ``standard``/``beta_c`` are joint throughout. Adam state carries
    over between phases.
    """
    cfg.validate()
    part = ParamPartition.from_model(model)
    params = dict(model.named_parameters())
    all_names = part.psi + part.theta
    state = AdamState()
    data_rng = np.random.default_rng([cfg.seed, 0])
    noise_rng = np.random.default_rng([cfg.seed, 1])
    stream = batch_stream(data, cfg.batch_size, data_rng)
    logs: list[StepLog] = []
    evals: list[EvalPoint] = []
    ppl_hist: list[float] = []
    model.train()
    if val is not None:
        nll, acc = evaluate_lm(model, val)
        evals.append(EvalPoint(0, nll, math.exp(nll), acc))

    step = 0
    for step in range(1, cfg.n_max + 1):
        phase = phase_for(step, cfg)
        names = part.psi if phase == "agg_psi" else all_names
        lr = lr_schedule(step, cfg.warmup_steps, cfg.n_max, cfg.lr)
        batch = next(stream)
        try:
            model.zero_grad()
            sample = posterior(model, batch, noise_rng)
            logits = forward(model, batch, sample, noise_rng)
            loss, bd = total_loss(cross_entropy(logits, batch.tgt_out, batch.tgt_mask), vi_loss(sample),
                                  strategy=cfg.strategy, beta=cfg.beta, C=cfg.C)
            nc.backward(loss)
            grads = {n: params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data)
                     for n in names}
            grads, pre_norm = clip_gradients(grads, cfg.clip_norm)
            adam_step(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        except TrainingAborted as exc:
            raise TrainingAborted(f"step {step} ({phase}): {exc}", step, phase, exc.param) from exc
        except NumericError as exc:
            raise TrainingAborted(f"step {step} ({phase}): {exc}", step, phase) from exc
        rec = StepLog(step, phase, lr, bd.ce, bd.vi, bd.vi_transformed, bd.total, pre_norm)
        logs.append(rec)
        if on_step is not None:
            on_step(rec, model)
        if val is not None and step % cfg.eval_interval == 0:
            nll, acc = evaluate_lm(model, val)
            evals.append(EvalPoint(step, nll, math.exp(nll), acc))
            log.info("step %d %s ce=%.4f vi=%.4f val_ppl=%.3f acc=%.3f", step, phase, bd.ce, bd.vi,
                     math.exp(nll), acc)
            if phase == "joint":
                ppl_hist.append(math.exp(nll))
                if early_stop_check(ppl_hist, cfg.patience):
                    return TrainResult(logs, evals, True, step)
    if val is not None and step % cfg.eval_interval != 0:
        nll, acc = evaluate_lm(model, val)  # always score the final parameters
        evals.append(EvalPoint(step, nll, math.exp(nll), acc))
    return TrainResult(logs, evals, False, step)


# --- backbone warm start -------------------------------------------------------------

LATENT_PREFIXES = (*SumModel.VARIATIONAL_PREFIXES, "gate.")


def backbone_names(model: SumModel) -> list[str]:
    """Parameters of the plain encoder-decoder: everything but the inference
    network, the flows and the gate."""
    return [n for n, _ in model.named_parameters() if not n.startswith(LATENT_PREFIXES)]


def warm_start_backbone(model: SumModel, data: Batch, steps: int, lr: float, batch_size: int = 8,
                        seed: int = 0, clip_norm: float = 1.0, warmup_frac: float = 0.1) -> list[float]:
    """Train the encoder-decoder with the latent path switched off, on mean
    sequence cross-entropy, before the latent module joins.

    Desk-scale stand-in for starting from a pretrained backbone. The latent
    parameters are never read, so the result depends only on the backbone
    initialisation, the data and ``seed``. Returns the per-step loss."""
    if steps < 0 or lr < 0:
        raise ConfigError(f"warm start needs steps >= 0 and lr >= 0, got {steps}, {lr}")
    params = dict(model.named_parameters())
    names = backbone_names(model)
    state = AdamState()
    stream = batch_stream(data, batch_size, np.random.default_rng([seed, 10]))
    noise_rng = np.random.default_rng([seed, 11])
    warm = int(round(warmup_frac * steps))
    losses = []
    model.train()
    for step in range(1, steps + 1):
        batch = next(stream)
        try:
            model.zero_grad()
            loss = cross_entropy(forward(model, batch, None, noise_rng), batch.tgt_out, batch.tgt_mask).mean()
            nc.backward(loss)
            grads, _ = clip_gradients({n: params[n].grad for n in names}, clip_norm)
            adam_step(params, grads, state, lr_schedule(step, warm, steps, lr))
        except TrainingAborted as exc:
            raise TrainingAborted(f"warm start step {step}: {exc}", step, "warm_start", exc.param) from exc
        except NumericError as exc:
            raise TrainingAborted(f"warm start step {step}: {exc}", step, "warm_start") from exc
        losses.append(loss.item())
        if step % 250 == 0:
            log.info("warm start step %d ce=%.4f", step, losses[-1])
    return losses


__all__ = [
    "AdamState", "CollapseReport", "EvalPoint", "LATENT_PREFIXES", "PHASES", "ParamPartition",
    "STEPLOG_COLUMNS", "STRATEGIES", "StepLog", "TrainConfig", "TrainResult", "adam_step",
    "backbone_names", "batch_stream", "clip_gradients", "collapse_monitor", "early_stop_check",
    "epochs_to_steps", "evaluate_lm", "global_norm", "lr_schedule", "phase_for", "read_steplog_csv",
    "theta_checksum", "train", "warm_start_backbone", "write_steplog_csv",
]
