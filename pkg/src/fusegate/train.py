"""Joint optimization of network and policy parameters.

The loss is cross entropy on the consensus prediction plus an efficiency
term: ``lambda_eff`` times the sum over gates of their differentiable FLOP
cost. Gate costs are normalized per gate to [0, 1] by the all-keep bound
``T * (m_x + m_y)`` so the trade-off weight is architecture independent; a
raw-units mode is available behind ``cost_units``.

SGD with classical momentum and a step learning-rate schedule; metrics are
logged one JSON object per line; the best-top1 checkpoint is retained.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, TrainingDiverged
from . import tensor as T
from .tensor import Tape, Tensor
from .layers import cross_entropy
from .model import BaselinePolicy, ToyNet
from .checkpoint import net_blobs, save_checkpoint
from .gating import DECISION_NAMES


@dataclass
class TrainConfig:
    lambda_eff: float = 0.1
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    lr_decay_epochs: tuple[int, ...] = (15, 25)
    lr_decay_factor: float = 0.1
    batch_size: int = 32
    seed: int = 0
    tau: float = 0.67
    warmup_epochs: int = 0          # epochs before the efficiency term engages
    grad_clip: float = 10.0
    cost_units: str = "normalized"  # or "raw"

    def __post_init__(self):
        if self.lambda_eff < 0:
            raise ConfigError("lambda_eff must be non-negative")
        if self.lr < 0:
            # lr == 0 is allowed as a diagnostic no-op configuration
            raise ConfigError("learning rate must be non-negative")
        decays = tuple(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ConfigError("decay epochs must be strictly increasing")
        self.lr_decay_epochs = decays
        if self.cost_units not in ("normalized", "raw"):
            raise ConfigError(f"cost_units must be normalized|raw, got {self.cost_units}")


@dataclass
class MetricsRecord:
    epoch: int
    top1: float
    top5: float | None
    mean_flops: float
    mean_util: float
    policy_fractions: dict[str, float] | None
    train_loss: float | None = None
    lr: float | None = None

    def to_json(self) -> str:
        out = {"epoch": self.epoch, "top1": self.top1}
        if self.top5 is not None:
            out["top5"] = self.top5
        out["mean_flops"] = self.mean_flops
        out["mean_util"] = self.mean_util
        if self.policy_fractions is not None:
            out["fractions"] = self.policy_fractions
        if self.train_loss is not None:
            out["train_loss"] = self.train_loss
        if self.lr is not None:
            out["lr"] = self.lr
        return json.dumps(out, sort_keys=True)


def loss_terms(video_logits: Tensor, labels: np.ndarray, gate_costs, lambda_eff: float):
    """Consensus cross entropy plus the weighted sum of per-gate costs."""
    ce = cross_entropy(video_logits, labels)
    if lambda_eff == 0.0 or not gate_costs:
        return ce, ce, None
    eff = gate_costs[0]
    for g in gate_costs[1:]:
        eff = T.add(eff, g)
    total = T.add(ce, T.mul(eff, lambda_eff))
    return total, ce, eff


def sgd_step(params: list[Tensor], grads: list[np.ndarray], lr: float,
             momentum: float, velocity: list[np.ndarray]) -> None:
    """v <- momentum * v + g; p <- p - lr * v, in matched order."""
    if not len(params) == len(grads) == len(velocity):
        raise ContractError("params, grads and velocity must align")
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        if g.shape != p.data.shape or v.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match "
                                f"parameter shape {p.data.shape}")
        v *= momentum
        v += g
        p.assign_(p.data - lr * v)


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint l2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g ** 2).sum()) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for i, g in enumerate(grads):
            if g is not None:
                grads[i] = g * scale
    return total


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: decay multiplies in at each listed epoch, inclusive."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    steps = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.lr * config.lr_decay_factor ** steps


def top_k_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    topk = np.argpartition(-logits, kth=min(k, logits.shape[1]) - 1, axis=1)[:, :k]
    return (topk == labels[:, None]).any(axis=1)


def evaluate(net: ToyNet, batch, tape: Tape | None = None,
             policy: BaselinePolicy | None = None,
             rng: np.random.Generator | None = None,
             batch_size: int = 64):
    """Deterministic eval pass: argmax policies, running BN statistics,
    hard-path cost accounting. Returns (MetricsRecord without epoch fields,
    list of PolicyTrace)."""
    clips, labels = batch.clips.data, batch.labels
    n = len(labels)
    hits1 = np.zeros(n, dtype=bool)
    hits5 = np.zeros(n, dtype=bool)
    flops = np.zeros(n)
    utils = []
    counts = np.zeros(3)
    traces = []
    k5 = net.config.num_classes >= 5
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        sub = clips[sl]
        if tape is not None:
            with tape.paused():
                res = net.forward_batch(sub, rng=rng, mode="eval", policy=policy)
        else:
            res = net.forward_batch(sub, rng=rng, mode="eval", policy=policy)
        logits = res.video_logits.data
        hits1[sl] = np.argmax(logits, axis=1) == labels[sl]
        if k5:
            hits5[sl] = top_k_hits(logits, labels[sl], 5)
        flops[sl] = res.cost.per_sample
        utils.append(res.cost.mean_util)
        traces.append(res.trace)
        for g in res.trace.gates:
            for code in range(3):
                counts[code] += int((g.decisions == code).sum())
    fractions = None
    if counts.sum() > 0:
        frac = counts / counts.sum()
        fractions = {name: float(frac[code]) for code, name in enumerate(DECISION_NAMES)}
    record = MetricsRecord(
        epoch=-1,
        top1=float(hits1.mean()),
        top5=float(hits5.mean()) if k5 else None,
        mean_flops=float(flops.mean()),
        mean_util=float(np.mean(utils)),
        policy_fractions=fractions,
    )
    return record, traces


@dataclass
class TrainResult:
    best: MetricsRecord
    history: list[MetricsRecord] = field(default_factory=list)
    checkpoint_path: str | None = None
    metrics_path: str | None = None


def train(net: ToyNet, train_batch, val_batch, config: TrainConfig,
          run_dir: str | None = None, config_echo: str = "",
          policy: BaselinePolicy | None = None,
          log=lambda msg: None) -> TrainResult:
    """Optimize ``net`` on one in-memory dataset; see module docstring.

    ``policy`` forces a baseline gating policy during both training and
    evaluation (the efficiency term is dropped: there are no policy
    parameters to steer).
    """
    tape = Tape()
    params = net.params()
    names = list(params)
    tensors = [params[n] for n in names]
    for p in tensors:
        tape.watch(p)
    velocity = [np.zeros(p.data.shape) for p in tensors]

    root = np.random.SeedSequence(config.seed)
    shuffle_rng, gumbel_rng, policy_rng = (np.random.default_rng(s)
                                           for s in root.spawn(3))
    clips, labels = train_batch.clips.data, train_batch.labels
    n = len(labels)
    if labels.max() >= net.config.num_classes:
        raise ContractError("dataset has more classes than the network head")

    metrics_path = checkpoint_path = None
    metrics_fh = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        metrics_path = os.path.join(run_dir, "metrics.jsonl")
        checkpoint_path = os.path.join(run_dir, "checkpoint.afck")
        metrics_fh = open(metrics_path, "w")

    best: MetricsRecord | None = None
    history: list[MetricsRecord] = []
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            lam = config.lambda_eff if epoch >= config.warmup_epochs else 0.0
            if policy is not None and policy.kind != "none":
                lam = 0.0
            order = shuffle_rng.permutation(n)
            epoch_loss = 0.0
            steps = 0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                res = net.forward_batch(clips[idx], rng=gumbel_rng, mode="train",
                                        policy=policy)
                gate_costs = res.cost.relaxed or []
                if config.cost_units == "raw" and gate_costs:
                    # undo the per-gate normalization: raw = util * T*(m_x+m_y)
                    gate_costs = [T.mul(g, gc.frames_norm)
                                  for g, gc in zip(gate_costs, res.cost.gates)]
                total, ce, _ = loss_terms(res.video_logits, labels[idx],
                                          gate_costs, lam)
                value = total.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {steps}, lr {lr}")
                tape.backward(total)
                grads = [p.grad for p in tensors]
                clip_gradients(grads, config.grad_clip)
                sgd_step(tensors, grads, lr, config.momentum, velocity)
                tape.reset()
                epoch_loss += value
                steps += 1
            record, _ = evaluate(net, val_batch, tape=tape, policy=policy,
                                 rng=policy_rng)
            record.epoch = epoch
            record.train_loss = epoch_loss / max(steps, 1)
            record.lr = lr
            history.append(record)
            log(f"epoch {epoch}: top1={record.top1:.3f} "
                f"util={record.mean_util:.3f} loss={record.train_loss:.4f}")
            if metrics_fh is not None:
                metrics_fh.write(record.to_json() + "\n")
                metrics_fh.flush()
            if best is None or record.top1 > best.top1:
                best = record
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, net_blobs(net), config_echo)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(best=best, history=history,
                       checkpoint_path=checkpoint_path, metrics_path=metrics_path)
