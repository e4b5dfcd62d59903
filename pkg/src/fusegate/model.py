"""Gated and baseline video networks.

ToyNet is a small residual 2-D CNN applied to every frame of a clip with the
frame axis folded into the batch. A gated block carries a fusion gate between
its two convolutions; per frame and per sample the gate decides which output
channels of the first convolution are computed, copied from the previous
frame's raw output, or zero-filled. Frame-level class scores are averaged
into the clip prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from . import tensor as T
from .tensor import Tensor
from . import layers as L
from .layers import BatchNormLayer, Conv2dLayer, LinearLayer
from . import gating as G
from .gating import (FusionGate, GateTrace, PolicyNet, PolicyTrace, conv_flops,
                     fuse)

VARIANTS = ("plain", "shift", "shift-last")


def default_gated(variant: str, n_blocks: int) -> tuple[bool, ...]:
    """plain/shift default to ungated; shift-last gates the deepest quarter."""
    if variant == "shift-last":
        tail = -(-n_blocks // 4)  # ceil
        return tuple(i >= n_blocks - tail for i in range(n_blocks))
    return tuple(False for _ in range(n_blocks))


@dataclass
class ToyNetConfig:
    num_classes: int
    frames: int = 8
    in_channels: int = 1
    stem_channels: int = 16
    blocks: tuple[tuple[int, int, int], ...] = (
        (16, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2))
    gated: tuple[bool, ...] | None = None
    variant: str = "plain"
    hidden_units: int = 64
    tau: float = 0.67
    shift_fraction: float = 0.125

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.gated is None:
            self.gated = default_gated(self.variant, len(self.blocks))
        self.gated = tuple(bool(g) for g in self.gated)
        if len(self.gated) != len(self.blocks):
            raise ConfigError(f"{len(self.gated)} gate flags for "
                              f"{len(self.blocks)} blocks")
        if self.variant == "shift-last":
            want = default_gated("shift-last", len(self.blocks))
            if self.gated != want:
                raise ConfigError("shift-last gates exactly the last "
                                  f"{sum(want)} block(s); got {self.gated}")
        if self.blocks[0][0] != self.stem_channels:
            raise ConfigError("first block must accept the stem's channels")
        for (ci, _, _), (_, prev_out, _) in zip(self.blocks[1:], self.blocks[:-1]):
            if ci != prev_out:
                raise ConfigError("block channel chain is inconsistent")

    @property
    def shifted(self) -> bool:
        return self.variant in ("shift", "shift-last")


@dataclass
class GateCost:
    block: int
    m_x: float
    m_y: float
    hard: np.ndarray            # (batch,) analytic FLOPs of this gate
    frames_norm: float = 1.0    # T * (m_x + m_y), the all-keep upper bound

    @property
    def util(self) -> np.ndarray:
        return self.hard / self.frames_norm


@dataclass
class CostReport:
    """Analytic FLOPs of one forward pass, per clip.

    ``fixed`` covers every ungated convolution (input independent);
    gated blocks are charged by the keep/reuse/skip accounting. ``relaxed``
    holds the per-gate differentiable normalized costs in train mode.
    """
    fixed: float
    gates: list[GateCost] = field(default_factory=list)
    relaxed: list[Tensor] | None = None

    @property
    def per_sample(self) -> np.ndarray:
        total = None
        for g in self.gates:
            total = g.hard if total is None else total + g.hard
        if total is None:
            return np.array([self.fixed])
        return self.fixed + total

    @property
    def mean_flops(self) -> float:
        return float(self.per_sample.mean())

    @property
    def mean_util(self) -> float:
        """Mean normalized gate utilization in [0, 1]; 1.0 when nothing is
        gated (the network is fully dense)."""
        if not self.gates:
            return 1.0
        return float(np.mean([g.util.mean() for g in self.gates]))


@dataclass
class BaselinePolicy:
    """Hand-made gating policies: forced distributions and norm-thresholding."""
    kind: str = "none"
    dist: tuple[float, float, float] = (1.0, 0.0, 0.0)
    keep_ratio: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "random", "threshold"):
            raise ConfigError(f"unknown baseline policy kind {self.kind!r}")
        if self.kind == "random":
            d = np.asarray(self.dist, dtype=np.float64)
            if d.shape != (3,) or (d < 0).any() or abs(d.sum() - 1.0) > 1e-9:
                raise ContractError(f"policy distribution must be 3 non-negative "
                                    f"values summing to 1, got {self.dist}")
        if self.kind == "threshold" and not 0.0 < self.keep_ratio <= 1.0:
            raise ContractError(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")


def apply_baseline_policy(policy: BaselinePolicy, y_t: Tensor, y_prev: Tensor,
                          rng: np.random.Generator | None):
    """Sample decisions without a policy network and fuse accordingly.

    random: i.i.d. keep/reuse/skip from ``dist`` per sample and channel.
    threshold: keep the strongest ``keep_ratio`` fraction of channels by L1
    activation norm, skip the rest (a pruning baseline; no reuse). Ties go to
    the lower channel index.
    """
    n, c = y_t.shape[0], y_t.shape[1]
    if policy.kind == "random":
        if rng is None:
            raise ContractError("random policy needs an rng")
        decisions = rng.choice(3, size=(n, c), p=np.asarray(policy.dist))
    elif policy.kind == "threshold":
        count = max(1, int(np.floor(policy.keep_ratio * c + 1e-9)))
        norms = np.abs(y_t.data).sum(axis=(2, 3))
        order = np.argsort(-norms, axis=1, kind="stable")
        decisions = np.full((n, c), G.SKIP, dtype=np.int64)
        np.put_along_axis(decisions, order[:, :count], G.KEEP, axis=1)
    else:
        raise ContractError(f"no decisions to apply for policy kind {policy.kind!r}")
    return decisions, fuse(y_t, y_prev, decisions)


class _Block:
    """conv-bn-relu [gate] conv-bn + skip, relu."""

    def __init__(self, index: int, in_c: int, out_c: int, stride: int, gated: bool,
                 cfg: ToyNetConfig, rng: np.random.Generator):
        self.index = index
        self.conv1 = Conv2dLayer(in_c, out_c, 3, stride, 1, rng)
        self.bn1 = BatchNormLayer(out_c)
        self.conv2 = Conv2dLayer(out_c, out_c, 3, 1, 1, rng)
        self.bn2 = BatchNormLayer(out_c)
        if stride != 1 or in_c != out_c:
            self.proj = Conv2dLayer(in_c, out_c, 1, stride, 0, rng)
            self.proj_bn = BatchNormLayer(out_c)
        else:
            self.proj = None
            self.proj_bn = None
        if gated:
            self.gate = FusionGate(PolicyNet(in_c, out_c, cfg.hidden_units, rng),
                                   cfg.tau)
        else:
            self.gate = None

    def conv_costs(self, h: int, w: int) -> tuple[float, float, int, int]:
        """(m_x, m_y) of the two convolutions for an h x w input, plus the
        output spatial dims after the block."""
        oh, ow = self.conv1.out_hw(h, w)
        m_x = conv_flops(self.conv1.out_channels, oh, ow, 3, self.conv1.in_channels)
        m_y = conv_flops(self.conv2.out_channels, oh, ow, 3, self.conv2.in_channels)
        return m_x, m_y, oh, ow

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.conv1.params(f"{prefix}.conv1"))
        out.update(self.bn1.params(f"{prefix}.bn1"))
        out.update(self.conv2.params(f"{prefix}.conv2"))
        out.update(self.bn2.params(f"{prefix}.bn2"))
        if self.proj is not None:
            out.update(self.proj.params(f"{prefix}.proj"))
            out.update(self.proj_bn.params(f"{prefix}.proj_bn"))
        if self.gate is not None:
            out.update(self.gate.policy.params(f"{prefix}.policy"))
        return out

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.bn1.state(f"{prefix}.bn1"))
        out.update(self.bn2.state(f"{prefix}.bn2"))
        if self.proj_bn is not None:
            out.update(self.proj_bn.state(f"{prefix}.proj_bn"))
        return out


@dataclass
class ForwardResult:
    frame_logits: Tensor          # (batch, T, K)
    video_logits: Tensor          # (batch, K), consensus over frames
    trace: PolicyTrace
    cost: CostReport


def consensus(frame_logits: Tensor) -> Tensor:
    """Average per-frame class scores over the frame axis.

    Accepts (T, K) for one clip or (batch, T, K); the mean is symmetric in
    the frames, so it carries no temporal order on its own.
    """
    if frame_logits.data.ndim == 2:
        return T.mean(frame_logits, axis=0)
    if frame_logits.data.ndim == 3:
        return T.mean(frame_logits, axis=1)
    raise DimensionError(f"consensus expects (T, K) or (batch, T, K), "
                         f"got {frame_logits.shape}")


class ToyNet:
    def __init__(self, config: ToyNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.stem = Conv2dLayer(config.in_channels, config.stem_channels, 3, 1, 1, rng)
        self.stem_bn = BatchNormLayer(config.stem_channels)
        self.blocks = [
            _Block(i, ci, co, s, config.gated[i], config, rng)
            for i, (ci, co, s) in enumerate(config.blocks)
        ]
        self.head = LinearLayer(config.blocks[-1][1], config.num_classes, rng=rng)

    # -- parameter plumbing ------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = dict(self.stem.params("stem"))
        out.update(self.stem_bn.params("stem_bn"))
        for i, b in enumerate(self.blocks):
            out.update(b.params(f"block{i}"))
        out.update(self.head.params("head"))
        return out

    def state(self) -> dict[str, np.ndarray]:
        out = dict(self.stem_bn.state("stem_bn"))
        for i, b in enumerate(self.blocks):
            out.update(b.state(f"block{i}"))
        return out

    def load_params(self, blobs: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.params()
        state = self.state()
        for name, arr in blobs.items():
            if name in params:
                params[name].assign_(arr)
            elif name in state:
                state[name][...] = arr
            elif strict:
                raise ContractError(f"checkpoint has unknown parameter {name!r}")
        if strict:
            missing = [n for n in {**params}.keys() | state.keys() if n not in blobs]
            if missing:
                raise ContractError(f"checkpoint is missing parameters: {sorted(missing)}")

    # -- cost bookkeeping ----------------------------------------------------

    def conv_cost_table(self, h: int, w: int) -> dict:
        """Per-layer analytic cost for one frame of an h x w input."""
        rows = []
        sh, sw = self.stem.out_hw(h, w)
        rows.append({"layer": "stem", "m": conv_flops(
            self.stem.out_channels, sh, sw, 3, self.stem.in_channels)})
        ch, cw = sh, sw
        for i, b in enumerate(self.blocks):
            m_x, m_y, oh, ow = b.conv_costs(ch, cw)
            rows.append({"layer": f"block{i}.conv1", "m": m_x, "gated": b.gate is not None})
            rows.append({"layer": f"block{i}.conv2", "m": m_y, "gated": b.gate is not None})
            if b.proj is not None:
                ph, pw = b.proj.out_hw(ch, cw)
                rows.append({"layer": f"block{i}.proj", "m": conv_flops(
                    b.proj.out_channels, ph, pw, 1, b.proj.in_channels)})
            ch, cw = oh, ow
        return {"rows": rows, "per_frame_total": sum(r["m"] for r in rows)}

    # -- forward -------------------------------------------------------------

    def forward_batch(self, clips, rng: np.random.Generator | None = None,
                      mode: str = "train",
                      policy: BaselinePolicy | None = None) -> ForwardResult:
        """Run a (batch, T, c, h, w) array of clips through the network.

        mode "train" samples gate decisions with straight-through
        Gumbel-Softmax and records relaxed costs; mode "eval" takes argmax
        policies, uses running batch-norm statistics and is deterministic.
        A baseline ``policy`` overrides the learned gates in either mode.
        """
        if mode not in ("train", "eval"):
            raise ContractError(f"unknown mode {mode!r}")
        data = clips.data if isinstance(clips, Tensor) else np.asarray(clips)
        if data.ndim != 5:
            raise DimensionError(f"expected (batch, T, c, h, w) clips, got {data.shape}")
        batch, frames = data.shape[0], data.shape[1]
        if frames != self.config.frames:
            raise ContractError(f"clip has {frames} frames, network expects "
                                f"{self.config.frames}")
        training = mode == "train"
        x = clips if isinstance(clips, Tensor) else Tensor(data)
        x = T.reshape(x, (batch * frames,) + data.shape[2:])

        h_in, w_in = data.shape[3], data.shape[4]
        x = T.relu(self.stem_bn(self.stem(x), training))
        fixed = conv_flops(self.stem.out_channels, *self.stem.out_hw(h_in, w_in),
                           3, self.stem.in_channels)

        trace = PolicyTrace()
        relaxed: list[Tensor] = []
        gate_costs: list[GateCost] = []
        ch, cw = self.stem.out_hw(h_in, w_in)
        for b in self.blocks:
            m_x, m_y, oh, ow = b.conv_costs(ch, cw)
            x, gate_cost, rel, gate_trace = self._block_forward(
                b, x, batch, frames, m_x, m_y, rng, training, policy)
            if b.gate is None:
                fixed += m_x + m_y
            else:
                gate_costs.append(gate_cost)
                trace.add(gate_trace)
                if rel is not None:
                    relaxed.append(rel)
            if b.proj is not None:
                fixed += conv_flops(b.proj.out_channels, oh, ow, 1,
                                    b.proj.in_channels)
            ch, cw = oh, ow

        v = L.global_avg_pool(x)
        logits = self.head(v)
        frame_logits = T.reshape(logits, (batch, frames, self.config.num_classes))
        video_logits = consensus(frame_logits)
        cost = CostReport(fixed=fixed * frames, gates=gate_costs,
                          relaxed=relaxed if training and relaxed else None)
        return ForwardResult(frame_logits=frame_logits, video_logits=video_logits,
                             trace=trace, cost=cost)

    def _block_forward(self, b: _Block, x: Tensor, batch: int, frames: int,
                       m_x: float, m_y: float, rng, training: bool,
                       policy: BaselinePolicy | None):
        if b.proj is not None:
            identity = b.proj_bn(b.proj(x), training)
        else:
            identity = x
        if self.config.shifted:
            x = L.temporal_shift(x, frames, self.config.shift_fraction)
        y_raw = T.relu(b.bn1(b.conv1(x), training))

        gate_cost = rel = gate_trace = None
        if b.gate is None:
            fused = y_raw
        else:
            b.gate.set_costs(m_x, m_y)
            c_out = b.conv1.out_channels
            y_hist = T.frame_delay(y_raw, frames)
            soft = None
            if policy is not None and policy.kind != "none":
                decisions, fused = apply_baseline_policy(policy, y_raw, y_hist, rng)
            else:
                v = L.global_avg_pool(x)
                logits = b.gate.policy(T.frame_delay(v, frames), v)
                if training:
                    sample = G.gumbel_softmax(logits, b.gate.tau, rng)
                    keep = T.take_last(sample.st, G.KEEP)
                    reuse = T.take_last(sample.st, G.REUSE)
                    fused = T.add(T.channel_scale(y_raw, keep),
                                  T.channel_scale(y_hist, reuse))
                    decisions = sample.decision
                    soft = sample.soft.data
                    norm = 1.0 / (frames * b.gate.normalizer)
                    per_clip = G.relaxed_cost(sample.st, frames, m_x, m_y)
                    rel = T.mean(T.mul(per_clip, norm))
                else:
                    decisions = G.argmax_decisions(logits.data)
                    fused = fuse(y_raw, y_hist, decisions)
                    soft = _softmax_np(logits.data)
            dec = decisions.reshape(batch, frames, c_out)
            hard = G.block_cost_batch(dec, m_x, m_y)
            gate_cost = GateCost(block=b.index, m_x=m_x, m_y=m_y, hard=hard,
                                 frames_norm=frames * (m_x + m_y))
            gate_trace = GateTrace(
                block=b.index, decisions=dec,
                soft=None if soft is None else soft.reshape(batch, frames, c_out, 3))

        out = b.bn2(b.conv2(fused), training)
        return T.relu(T.add(out, identity)), gate_cost, rel, gate_trace

    def forward_clip(self, clip, rng: np.random.Generator | None = None,
                     mode: str = "eval", policy: BaselinePolicy | None = None):
        """Single-clip forward: (T, c, h, w) -> ((T, K) frame logits, trace,
        cost report)."""
        data = clip.data if isinstance(clip, Tensor) else np.asarray(clip)
        if data.ndim != 4:
            raise DimensionError(f"expected (T, c, h, w) clip, got {data.shape}")
        result = self.forward_batch(data[None], rng=rng, mode=mode, policy=policy)
        frame_logits = T.reshape(result.frame_logits,
                                 (self.config.frames, self.config.num_classes))
        return frame_logits, result.trace, result.cost


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def count_params(net: ToyNet) -> int:
    """Total learnable scalars, policy networks included."""
    return int(sum(p.data.size for p in net.params().values()))
