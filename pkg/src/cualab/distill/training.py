"""Distillation loss, adapter training loop and perplexity evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import ToyLM, adapter_parameters, backbone_checksum

log = logging.getLogger(__name__)

IGNORE_INDEX = -100


class TrainingDiverged(RuntimeError):
    pass


class FrozenWeightViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha_kd: float = 0.1
    beta: float = 2.0
    temperature: float = 1.5
    learning_rate: float = 1e-4
    warmup_steps: int = 0
    epochs: int = 1
    steps_per_epoch: int = 100
    batch_size: int = 16
    seed: int = 0
    trend_window: int = 50
    trend_tolerance: float = 0.05  # relative rise over the best earlier window mean

    def __post_init__(self):
        if self.alpha_kd < 0 or self.beta < 0:
            raise ValueError("alpha_kd and beta must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 0 or self.steps_per_epoch < 0 or self.batch_size < 1:
            raise ValueError("invalid schedule")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def kd_loss_terms(student_logits, teacher_logits, labels, cfg: TrainConfig):
    """Return ``(loss, kd_term, ce_term)``.

    ``kd_term`` is ``T^2 KL(softmax(teacher/T) || softmax(student/T))`` averaged
    over positions; ``ce_term`` is the mean cross-entropy over positions whose
    label is not ``IGNORE_INDEX`` (0 when every position is ignored).
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    if labels.shape != student_logits.shape[:-1]:
        raise ValueError("labels must match the logits' leading dimensions")
    V = student_logits.shape[-1]
    T = cfg.temperature
    s = student_logits.reshape(-1, V)
    t = teacher_logits.reshape(-1, V).detach()
    log_ps = F.log_softmax(s / T, dim=-1)
    log_pt = F.log_softmax(t / T, dim=-1)
    kd = (T * T) * F.kl_div(log_ps, log_pt, log_target=True, reduction="batchmean")
    flat = labels.reshape(-1)
    if bool((flat != IGNORE_INDEX).any()):
        ce = F.cross_entropy(s, flat, ignore_index=IGNORE_INDEX)
    else:
        ce = s.sum() * 0.0
    return cfg.alpha_kd * kd + cfg.beta * ce, kd, ce


def kd_loss(student_logits, teacher_logits, labels, cfg: TrainConfig):
    return kd_loss_terms(student_logits, teacher_logits, labels, cfg)[0]


def random_batch(tokens: np.ndarray, context: int, batch_size: int, gen: torch.Generator):
    """Random contiguous windows; returns ``(inputs, targets)``."""
    if len(tokens) <= context:
        raise ValueError("corpus shorter than one context window")
    starts = torch.randint(0, len(tokens) - context, (batch_size,), generator=gen)
    data = torch.as_tensor(tokens)
    idx = starts[:, None] + torch.arange(context + 1)
    win = data[idx]
    return win[:, :-1], win[:, 1:]


def eval_windows(tokens: np.ndarray, context: int):
    """Non-overlapping windows covering ``tokens`` (the tail shorter than 2 is dropped)."""
    data = torch.as_tensor(tokens)
    out = []
    for start in range(0, len(tokens) - 1, context):
        win = data[start:start + context + 1]
        if len(win) >= 2:
            out.append((win[:-1][None], win[1:][None]))
    return out


@torch.no_grad()
def perplexity(model: ToyLM, tokens: np.ndarray, batch_size: int = 32) -> float:
    """``exp`` of the mean next-token negative log-likelihood."""
    if len(tokens) < 2:
        raise ValueError("corpus must contain at least two tokens")
    model.eval()
    ctx = model.cfg.context_length
    windows = eval_windows(tokens, ctx)
    full = [w for w in windows if w[0].shape[1] == ctx]
    tail = [w for w in windows if w[0].shape[1] != ctx]
    total, count = 0.0, 0
    for i in range(0, len(full), batch_size):
        x = torch.cat([w[0] for w in full[i:i + batch_size]])
        y = torch.cat([w[1] for w in full[i:i + batch_size]])
        logits = model(x).to(torch.float64)
        total += F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1), reduction="sum").item()
        count += y.numel()
    for x, y in tail:
        logits = model(x).to(torch.float64)
        total += F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1), reduction="sum").item()
        count += y.numel()
    return math.exp(total / count)


def pretrain(model: ToyLM, tokens: np.ndarray, steps: int = 1500, lr: float = 3e-3,
             batch_size: int = 32, seed: int = 0) -> list[float]:
    """Plain next-token training of every backbone weight (teacher preparation)."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.1 + 0.9 * max(0.0, 1 - s / max(steps, 1)))
    model.train()
    losses = []
    for _ in range(steps):
        x, y = random_batch(tokens, model.cfg.context_length, batch_size, gen)
        logits = model(x)
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
    model.eval()
    return losses


def lr_lambda(cfg: TrainConfig):
    total = max(cfg.total_steps, 1)
    warm = cfg.warmup_steps

    def f(step: int) -> float:
        if warm and step < warm:
            return (step + 1) / warm
        return max(0.0, (total - step) / max(total - warm, 1))

    return f


def _check_trend(losses: list[float], window: int, tolerance: float) -> None:
    n = len(losses) // window
    if n < 2:
        return
    means = [float(np.mean(losses[i * window:(i + 1) * window])) for i in range(n)]
    best = means[0]
    for cur in means[1:]:
        if cur > best * (1.0 + tolerance):
            raise TrainingDiverged(
                f"smoothed loss rose from {best:.4f} to {cur:.4f} (window {window})")
        best = min(best, cur)


@dataclass
class TrainResult:
    history: list[dict]
    checksum_before: str
    checksum_after: str

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"] if self.history else float("nan")


def train_adapters(student: ToyLM, teacher: ToyLM, tokens: np.ndarray, cfg: TrainConfig,
                   check_trend: bool = True) -> TrainResult:
    """Train only the adapter parameters of ``student`` against ``teacher``."""
    params = adapter_parameters(student)
    trainable = [p for p in params if p.requires_grad]
    before = backbone_checksum(student)
    history: list[dict] = []
    if cfg.total_steps == 0 or not trainable:
        return TrainResult(history, before, before)

    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(cfg))
    teacher.eval()
    student.train()
    ctx = student.cfg.context_length
    step = 0
    for _epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            x, y = random_batch(tokens, ctx, cfg.batch_size, gen)
            with torch.no_grad():
                t_logits = teacher(x)
            s_logits = student(x)
            loss, kd, ce = kd_loss_terms(s_logits, t_logits, y, cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}: kd={kd.item()} ce={ce.item()}")
            lr = sched.get_last_lr()[0]
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            history.append({"step": step, "loss": loss.item(), "kd_term": kd.item(),
                            "ce_term": ce.item(), "lr": lr})
            step += 1
        if check_trend:
            _check_trend([h["loss"] for h in history], cfg.trend_window, cfg.trend_tolerance)
    student.eval()
    after = backbone_checksum(student)
    if after != before:
        raise FrozenWeightViolation("backbone weights changed during adapter training")
    return TrainResult(history, before, after)


METRIC_COLUMNS = ["step", "loss", "kd_term", "ce_term", "lr"]


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
