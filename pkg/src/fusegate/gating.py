"""Ternary channel gating: policy network, Gumbel-Softmax sampling, the
keep/reuse/skip fusion rule, and the analytic FLOP accounting for a gated
pair of convolutions.

Decision codes: 0 = keep (compute the channel), 1 = reuse (copy the raw
previous-frame output), 2 = skip (zero-fill). A gated block charges its
upstream convolution for every channel that is kept now or reused at the
next frame, and its downstream convolution for every input channel that is
not skipped.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from . import tensor as T
from .tensor import Tensor
from .layers import LinearLayer, global_avg_pool

KEEP, REUSE, SKIP = 0, 1, 2
DECISION_NAMES = ("keep", "reuse", "skip")


def conv_flops(c_out: int, h_out: int, w_out: int, k: int, c_in: int) -> float:
    """Analytic cost of one convolution: one op per multiply-accumulate plus
    one per-output-element bias add."""
    if min(c_out, h_out, w_out, k, c_in) < 1:
        raise ContractError("conv_flops arguments must be positive")
    return float(c_out * h_out * w_out * (k * k * c_in + 1))


@dataclass
class GumbelSample:
    """One straight-through draw: discrete forward, relaxed backward.

    ``hard`` is exactly one-hot per channel; ``soft`` is the temperature-
    relaxed distribution for the same noise; ``st`` forwards the hard values
    while routing gradient to ``soft``; ``decision`` = argmax of hard.
    """
    hard: np.ndarray          # (..., 3) one-hot float
    soft: Tensor              # (..., 3) positive, sums to 1
    st: Tensor                # (..., 3) straight-through combination
    decision: np.ndarray      # (...,) int in {0, 1, 2}


def gumbel_softmax(logits: Tensor, tau: float, rng: np.random.Generator) -> GumbelSample:
    """Sample one categorical decision per row of trailing size 3.

    Hard samples come from the Gumbel-max trick on log softmax(logits); the
    soft surrogate divides the same perturbed log-probabilities by ``tau``
    before renormalizing, so hard and soft share the argmax.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if logits.shape[-1] != 3:
        raise DimensionError(f"expected trailing axis of 3 choices, got {logits.shape}")
    if not np.isfinite(logits.data).all():
        raise NumericError("non-finite policy logits")
    u = rng.random(logits.shape)
    gumbel = -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))
    log_r = T.log_softmax(logits, axis=-1)
    perturbed = T.add(log_r, Tensor(gumbel))
    decision = np.argmax(perturbed.data, axis=-1)
    hard = np.zeros(logits.shape)
    np.put_along_axis(hard, decision[..., None], 1.0, axis=-1)
    soft = T.softmax(T.mul(perturbed, 1.0 / tau), axis=-1)
    st = T.straight_through(soft, hard)
    return GumbelSample(hard=hard, soft=soft, st=st, decision=decision)


def argmax_decisions(logits: np.ndarray) -> np.ndarray:
    """Deterministic eval policy: argmax of softmax(logits); ties resolve to
    the lowest code (keep < reuse < skip)."""
    return np.argmax(logits, axis=-1)


def fuse(y_t: Tensor, y_prev: Tensor, decision: np.ndarray) -> Tensor:
    """Assemble the output map channel by channel: keep -> fresh, reuse ->
    previous raw output, skip -> zeros. Case analysis over hard decisions."""
    if y_t.shape != y_prev.shape:
        raise DimensionError(f"fuse shape mismatch: {y_t.shape} vs {y_prev.shape}")
    decision = np.asarray(decision)
    c = y_t.shape[1]
    if decision.shape not in ((c,), y_t.shape[:2]):
        raise DimensionError(
            f"decisions {decision.shape} do not match {c} channels of {y_t.shape}")
    if decision.shape == (c,):
        decision = np.broadcast_to(decision, y_t.shape[:2])
    keep = Tensor((decision == KEEP).astype(np.float64))
    reuse = Tensor((decision == REUSE).astype(np.float64))
    return T.add(T.channel_scale(y_t, keep), T.channel_scale(y_prev, reuse))


def _validate_decisions(decisions: np.ndarray) -> np.ndarray:
    decisions = np.asarray(decisions)
    if decisions.ndim != 2:
        raise DimensionError(f"expected (T, channels) decisions, got {decisions.shape}")
    if not np.isin(decisions, (KEEP, REUSE, SKIP)).all():
        raise ContractError("decision codes must be 0 (keep), 1 (reuse) or 2 (skip)")
    return decisions


def block_cost(decisions: np.ndarray, m_x: float, m_y: float) -> float:
    """Analytic FLOPs of one gated block for one clip's hard decisions.

    Per frame, the upstream conv is charged for the channel fraction that is
    kept now or reused at the next frame (the frame after the last counts as
    all-skip), and the downstream conv for the fraction not skipped.
    """
    p = _validate_decisions(decisions)
    frames, c = p.shape
    p_next = np.full_like(p, SKIP)
    p_next[:-1] = p[1:]
    upstream = ((p == KEEP) | (p_next == REUSE)).mean(axis=1)
    not_skipped = 1.0 - (p == SKIP).mean(axis=1)
    return float((upstream * m_x + not_skipped * m_y).sum())


def block_cost_batch(decisions: np.ndarray, m_x: float, m_y: float) -> np.ndarray:
    """block_cost over a (batch, T, channels) array, vectorized."""
    return np.array([block_cost(d, m_x, m_y) for d in decisions])


def relaxed_cost(st: Tensor, frames: int, m_x: float, m_y: float) -> Tensor:
    """Differentiable block cost from straight-through samples.

    ``st`` is (batch*frames, channels, 3) in folded frame order. The forward
    value equals ``block_cost`` of the hard decisions exactly; gradient flows
    through the soft path. Returns a (batch,) tensor of per-clip FLOPs.
    """
    if st.shape[-1] != 3:
        raise DimensionError(f"expected trailing one-hot axis of 3, got {st.shape}")
    lead, c = st.shape[0], st.shape[1]
    if lead % frames != 0:
        raise ContractError(f"leading dim {lead} not divisible by T={frames}")
    keep = T.take_last(st, KEEP)
    reuse = T.take_last(st, REUSE)
    skip = T.take_last(st, SKIP)
    reuse_next = T.frame_advance(reuse, frames)      # all-skip boundary: zeros
    # 1[keep now or reused next] via inclusive-or on {0,1} indicators
    used = T.sub(T.add(keep, reuse_next), T.mul(keep, reuse_next))
    batch = lead // frames
    used_frac = T.mul(T.tsum(T.reshape(used, (batch, frames, c)), axis=(1, 2)), 1.0 / c)
    skip_frac = T.mul(T.tsum(T.reshape(skip, (batch, frames, c)), axis=(1, 2)), 1.0 / c)
    up = T.mul(used_frac, m_x)
    down = T.mul(T.sub(Tensor(np.full(batch, float(frames))), skip_frac), m_y)
    return T.add(up, down)


def block_cost_relaxed(sample: GumbelSample, m_x: float, m_y: float) -> Tensor:
    """Differentiable cost of one clip's (T, channels, 3) sample."""
    frames = sample.st.shape[0]
    return T.take_last(T.reshape(relaxed_cost(sample.st, frames, m_x, m_y), (1,)), 0)


class PolicyNet:
    """Two fully-connected layers mapping pooled [previous; current] features
    to per-channel ternary logits. The output layer starts at zero so the
    initial policy is uniform."""

    def __init__(self, in_channels: int, gated_channels: int, hidden: int,
                 rng: np.random.Generator):
        if hidden < 1:
            raise ContractError(f"hidden width must be positive, got {hidden}")
        self.fc1 = LinearLayer(2 * in_channels, hidden, rng=rng)
        self.fc2 = LinearLayer(hidden, 3 * gated_channels, zero_init=True)
        self.gated_channels = gated_channels

    def __call__(self, v_prev: Tensor, v_t: Tensor) -> Tensor:
        """Logits of shape (n, gated_channels, 3)."""
        h = T.relu(self.fc1(T.concat(v_prev, v_t, axis=1)))
        q = self.fc2(h)
        return T.reshape(q, (q.shape[0], self.gated_channels, 3))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.fc1.params(f"{prefix}.fc1"), **self.fc2.params(f"{prefix}.fc2")}


class FusionGate:
    """Policy network plus the cost constants of the two convolutions it
    governs. ``m_x``/``m_y`` must be refreshed whenever input spatial dims
    change (see ``set_costs``)."""

    def __init__(self, policy: PolicyNet, tau: float = 0.67):
        if tau <= 0:
            raise ContractError(f"tau must be positive, got {tau}")
        self.policy = policy
        self.tau = tau
        self.m_x = None
        self.m_y = None

    def set_costs(self, m_x: float, m_y: float) -> None:
        if m_x <= 0 or m_y <= 0:
            raise ContractError("conv costs must be positive")
        self.m_x = float(m_x)
        self.m_y = float(m_y)

    @property
    def normalizer(self) -> float:
        return self.m_x + self.m_y


def gate_forward(gate: FusionGate, upstream, x_prev: Tensor, x_t: Tensor,
                 y_raw_prev: Tensor, rng: np.random.Generator | None,
                 mode: str = "train"):
    """Run one gated step for a single frame batch.

    ``upstream`` computes the raw (pre-fusion) feature map from ``x_t``;
    ``y_raw_prev`` is its value at the previous frame (zeros at t=0). Returns
    (fused map, raw map, GumbelSample-or-decisions) depending on mode:
    train samples with straight-through, eval takes the argmax policy.
    """
    if x_prev.shape != x_t.shape:
        raise DimensionError(
            f"previous/current frames disagree: {x_prev.shape} vs {x_t.shape}")
    v_prev = global_avg_pool(x_prev)
    v_t = global_avg_pool(x_t)
    logits = gate.policy(v_prev, v_t)
    y_raw = upstream(x_t)
    if mode == "train":
        if rng is None:
            raise ContractError("train-mode sampling needs an rng")
        sample = gumbel_softmax(logits, gate.tau, rng)
        keep = T.take_last(sample.st, KEEP)
        reuse = T.take_last(sample.st, REUSE)
        fused = T.add(T.channel_scale(y_raw, keep), T.channel_scale(y_raw_prev, reuse))
        return fused, y_raw, sample
    if mode == "eval":
        decision = argmax_decisions(logits.data)
        return fuse(y_raw, y_raw_prev, decision), y_raw, decision
    raise ContractError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# trace bookkeeping


@dataclass
class GateTrace:
    """Per-gate record of every sampled decision in a batch."""
    block: int
    decisions: np.ndarray                 # (batch, T, channels) int
    soft: np.ndarray | None = None        # (batch, T, channels, 3)

    @property
    def channels(self) -> int:
        return self.decisions.shape[2]


@dataclass
class PolicyTrace:
    """All gate records for one forward pass: one decision per gate per
    sample per frame per channel."""
    gates: list[GateTrace] = field(default_factory=list)

    def add(self, trace: GateTrace) -> None:
        self.gates.append(trace)

    def fractions(self) -> np.ndarray:
        """Overall (keep, reuse, skip) fractions across every decision."""
        counts = np.zeros(3)
        for g in self.gates:
            for code in (KEEP, REUSE, SKIP):
                counts[code] += int((g.decisions == code).sum())
        total = counts.sum()
        if total == 0:
            raise ContractError("no gated decisions recorded")
        return counts / total


def export_trace_csv(traces: list[PolicyTrace], path) -> None:
    """Flat CSV dump: (block_id, sample_id, frame, channel, decision).
    Sample ids run consecutively across the given traces."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block_id", "sample_id", "frame", "channel", "decision"])
        offset = 0
        for trace in traces:
            batch = trace.gates[0].decisions.shape[0] if trace.gates else 0
            for g in trace.gates:
                b, frames, c = g.decisions.shape
                for s in range(b):
                    for t in range(frames):
                        row = g.decisions[s, t]
                        for ch in range(c):
                            writer.writerow([g.block, offset + s, t, ch, int(row[ch])])
            offset += batch


def export_trace_summary(traces: list[PolicyTrace], path) -> None:
    """JSON summary of per-block decision fractions."""
    per_block: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for trace in traces:
        for g in trace.gates:
            acc = per_block.setdefault(g.block, np.zeros(3))
            for code in (KEEP, REUSE, SKIP):
                acc[code] += int((g.decisions == code).sum())
            counts[g.block] = counts.get(g.block, 0) + g.decisions.size
    summary = {
        str(block): {name: per_block[block][code] / counts[block]
                     for code, name in enumerate(DECISION_NAMES)}
        for block in sorted(per_block)
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)


def load_trace_csv(path) -> list[GateTrace]:
    """Rebuild per-gate decision arrays from an exported CSV."""
    cells: dict[int, dict[tuple[int, int, int], int]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            block = int(row["block_id"])
            key = (int(row["sample_id"]), int(row["frame"]), int(row["channel"]))
            cells.setdefault(block, {})[key] = int(row["decision"])
    traces = []
    for block in sorted(cells):
        entries = cells[block]
        samples = 1 + max(k[0] for k in entries)
        frames = 1 + max(k[1] for k in entries)
        channels = 1 + max(k[2] for k in entries)
        arr = np.zeros((samples, frames, channels), dtype=np.int64)
        for (s, t, ch), d in entries.items():
            arr[s, t, ch] = d
        traces.append(GateTrace(block=block, decisions=arr))
    return traces
