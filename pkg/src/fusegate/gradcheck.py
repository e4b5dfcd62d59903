"""Central finite-difference verification of every recorded primitive.

Each registered check builds a scalar function of one or more leaf tensors,
computes the taped gradient, then compares against central differences with
h = 1e-5 in float64. The reported figure is the l2-norm relative error
||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||).

Inputs are drawn away from relu/argmax kinks so the difference quotient sees
a smooth function; checks that involve sampling freeze their noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from . import layers as L
from .tensor import Tensor, Tape


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tolerance


def numeric_gradient(fn: Callable[[], float], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-returning closure w.r.t. one leaf."""
    base = leaf.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.reshape(-1).copy()
        bumped[i] += h
        leaf.assign_(bumped.reshape(base.shape))
        up = fn()
        bumped[i] -= 2 * h
        leaf.assign_(bumped.reshape(base.shape))
        down = fn()
        flat[i] = (up - down) / (2 * h)
    leaf.assign_(base)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray,
              floor: float = 1e-6) -> float:
    """Norm relative error with a magnitude floor.

    The floor keeps identically-zero gradients (e.g. a conv bias that a
    following train-mode batch norm cancels exactly) from dividing finite-
    difference roundoff by itself and reading as order-1 error.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_function(build: Callable[[list[Tensor]], Tensor], leaves: list[np.ndarray],
                   h: float = 1e-5) -> float:
    """Gradcheck a graph builder over fresh leaves; returns worst rel error."""
    tape = Tape()
    ts = [tape.leaf(a) for a in leaves]
    loss = build(ts)
    tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in ts]
    tape.reset()

    def value():
        with tape.paused():
            return build(ts).item()

    worst = 0.0
    for t, g in zip(ts, analytic):
        numeric = numeric_gradient(value, t, h)
        worst = max(worst, rel_error(g, numeric))
    return worst


def _away_from_kinks(rng, shape, margin=0.15):
    """Continuous values with |x| >= margin, so relu FD stays exact."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def _sum_all(x: Tensor) -> Tensor:
    # weighted sum keeps component gradients distinguishable
    w = np.linspace(0.5, 1.5, x.size).reshape(x.shape)
    return T.tsum(T.mul(x, Tensor(w)))


def registered_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float], float]]:
    """Every primitive paired with its check closure and tolerance."""
    checks: list[tuple[str, Callable[[], float], float]] = []

    def add(name, fn, tol=1e-6):
        checks.append((name, fn, tol))

    add("add", lambda: check_function(
        lambda ts: _sum_all(T.add(ts[0], ts[1])),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]))
    add("sub", lambda: check_function(
        lambda ts: _sum_all(T.sub(ts[0], ts[1])),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]))
    add("mul", lambda: check_function(
        lambda ts: _sum_all(T.mul(ts[0], ts[1])),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]))
    add("relu", lambda: check_function(
        lambda ts: _sum_all(T.relu(ts[0])), [_away_from_kinks(rng, (4, 5))]))
    add("exp", lambda: check_function(
        lambda ts: _sum_all(T.exp(ts[0])), [rng.normal(size=(3, 4))]))
    add("log", lambda: check_function(
        lambda ts: _sum_all(T.log(ts[0])), [rng.uniform(0.5, 2.0, (3, 4))]))
    add("matmul", lambda: check_function(
        lambda ts: _sum_all(T.matmul(ts[0], ts[1])),
        [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]))
    add("sum", lambda: check_function(
        lambda ts: _sum_all(T.tsum(ts[0], axis=(1, 2))),
        [rng.normal(size=(2, 3, 4))]))
    add("reshape", lambda: check_function(
        lambda ts: _sum_all(T.reshape(ts[0], (6, 2))), [rng.normal(size=(3, 4))]))
    add("concat", lambda: check_function(
        lambda ts: _sum_all(T.concat(ts[0], ts[1], axis=1)),
        [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))]))
    add("take_last", lambda: check_function(
        lambda ts: _sum_all(T.take_last(ts[0], 1)), [rng.normal(size=(2, 4, 3))]))
    add("softmax", lambda: check_function(
        lambda ts: _sum_all(T.softmax(ts[0])), [rng.normal(size=(3, 5))]))
    add("log_softmax", lambda: check_function(
        lambda ts: _sum_all(T.log_softmax(ts[0])), [rng.normal(size=(3, 5))]))
    add("frame_delay", lambda: check_function(
        lambda ts: _sum_all(T.frame_delay(ts[0], 3)), [rng.normal(size=(6, 4))]))
    add("frame_advance", lambda: check_function(
        lambda ts: _sum_all(T.frame_advance(ts[0], 3)), [rng.normal(size=(6, 4))]))
    add("channel_scale", lambda: check_function(
        lambda ts: _sum_all(T.channel_scale(ts[0], ts[1])),
        [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3))]))
    add("straight_through", lambda: _check_straight_through(rng))
    add("conv2d", lambda: check_function(
        lambda ts: _sum_all(L.conv2d(ts[0], ts[1], ts[2], stride=1, padding=1)),
        [rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)),
         rng.normal(size=(4,))]), 1e-5)
    add("conv2d_strided", lambda: check_function(
        lambda ts: _sum_all(L.conv2d(ts[0], ts[1], ts[2], stride=2, padding=1)),
        [rng.normal(size=(2, 2, 7, 7)), rng.normal(size=(3, 3, 3, 2)),
         rng.normal(size=(3,))]), 1e-5)
    add("linear", lambda: check_function(
        lambda ts: _sum_all(L.linear(ts[0], ts[1], ts[2])),
        [rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=(2,))]))
    add("global_avg_pool", lambda: check_function(
        lambda ts: _sum_all(L.global_avg_pool(ts[0])),
        [rng.normal(size=(2, 3, 4, 4))]))
    add("cross_entropy", lambda: check_function(
        lambda ts: L.cross_entropy(ts[0], np.array([1, 0, 2])),
        [rng.normal(size=(3, 4))]), 1e-5)
    add("temporal_shift", lambda: check_function(
        lambda ts: _sum_all(L.temporal_shift(ts[0], 3, 0.25)),
        [rng.normal(size=(6, 4, 3, 3))]))
    add("batch_norm_train", lambda: _check_batch_norm(rng, training=True), 1e-5)
    add("batch_norm_eval", lambda: _check_batch_norm(rng, training=False), 1e-5)
    add("gated_block", lambda: _check_gated_block(rng), 1e-4)

    return checks


def _check_straight_through(rng) -> float:
    """The straight-through node must hand the output gradient to the soft
    input unchanged, regardless of the hard values."""
    tape = Tape()
    soft = tape.leaf(rng.normal(size=(4, 3)))
    hard = np.zeros((4, 3))
    hard[np.arange(4), rng.integers(0, 3, 4)] = 1.0
    w = Tensor(rng.normal(size=(4, 3)))
    st = T.straight_through(soft, hard)
    tape.backward(T.tsum(T.mul(st, w)))
    return rel_error(soft.grad, w.data)


def _check_batch_norm(rng, training: bool) -> float:
    running_mean = rng.normal(size=3) * 0.1
    running_var = rng.uniform(0.5, 1.5, 3)

    def build(ts):
        rm, rv = running_mean.copy(), running_var.copy()
        out = L.batch_norm(ts[0], ts[1], ts[2], rm, rv, training=training)
        return _sum_all(out)

    return check_function(build, [rng.normal(size=(4, 3, 3, 3)),
                                  rng.uniform(0.5, 1.5, 3), rng.normal(size=3)])


def _check_gated_block(rng) -> float:
    """Full gated step with frozen noise, differentiated on the soft path.

    Fusion and the cost term use the relaxed sample directly (no hard
    overwrite), which is the smooth function the straight-through estimator
    takes its gradient from; the straight-through node itself is verified
    separately by forward-value and gradient-identity checks.
    """
    from . import gating as G

    frames, c_in, c_out, hw = 3, 2, 3, 5
    x = rng.normal(size=(frames, c_in, hw, hw))
    noise = -np.log(-np.log(rng.uniform(1e-6, 1 - 1e-6, (frames, c_out, 3))))
    labels = np.array([1])

    def build(ts):
        (xt, w1, b1, g1, be1, fw1, fb1, fw2, fb2, w2, b2, hw_, hb_) = ts
        y_raw = T.relu(L.batch_norm(L.conv2d(xt, w1, b1, 1, 1), g1, be1,
                                    np.zeros(c_out), np.ones(c_out), training=True))
        v = L.global_avg_pool(xt)
        v_prev = T.frame_delay(v, frames)
        h = T.relu(L.linear(T.concat(v_prev, v, axis=1), fw1, fb1))
        q = T.reshape(L.linear(h, fw2, fb2), (frames, c_out, 3))
        log_r = T.log_softmax(q)
        soft = T.softmax(T.mul(T.add(log_r, Tensor(noise)), 1.0 / 0.67))
        keep = T.take_last(soft, G.KEEP)
        reuse = T.take_last(soft, G.REUSE)
        y_hist = T.frame_delay(y_raw, frames)
        fused = T.add(T.channel_scale(y_raw, keep), T.channel_scale(y_hist, reuse))
        out = L.conv2d(fused, w2, b2, 1, 1)
        logits = L.linear(L.global_avg_pool(out), hw_, hb_)
        clip_logits = T.mean(T.reshape(logits, (1, frames, 2)), axis=1)
        ce = L.cross_entropy(clip_logits, labels)
        cost = T.mul(T.tsum(G.relaxed_cost(soft, frames, 10.0, 6.0)),
                     0.1 / (frames * 16.0))
        return T.add(ce, cost)

    leaves = [x,
              rng.normal(size=(c_out, 3, 3, c_in)) * 0.5, rng.normal(size=c_out) * 0.1,
              rng.uniform(0.8, 1.2, c_out), rng.normal(size=c_out) * 0.1,
              rng.normal(size=(4, 2 * c_in)) * 0.5, rng.normal(size=4) * 0.1,
              rng.normal(size=(3 * c_out, 4)) * 0.5, rng.normal(size=3 * c_out) * 0.1,
              rng.normal(size=(2, 3, 3, c_out)) * 0.5, rng.normal(size=2) * 0.1,
              rng.normal(size=(2, 2)) * 0.5, rng.normal(size=2) * 0.1]
    return check_function(build, leaves)


def run_all(seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    """Run every registered check once. ``corrupt`` injects a wrong backward
    for the named op across the whole run; checks that exercise it must fail,
    proving the finite-difference harness has teeth."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, tol in registered_checks(rng):
        if corrupt is not None:
            with T.inject_backward_fault(corrupt, scale=1.02):
                err = fn()
        else:
            err = fn()
        results.append(CheckResult(name=name, rel_err=err, tolerance=tol))
    return results
