"""Independent reference implementations used to cross-check the fast paths.

Includes a direct nested-loop convolution, an instrumented operation counter
for it, and an on-demand sparse executor for a gated block that only
computes the channels the policy asks for. The counters follow the analytic
cost convention: one operation per kernel multiply-accumulate; bias work in
the downstream convolution is charged proportionally to the fraction of
input channels actually used, exactly as the fractional cost model scales
it. Kernel MACs, which dominate, are counted one per executed operation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .gating import KEEP, REUSE, SKIP
from .layers import conv_out_hw


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                     stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct nested-loop cross-correlation; the oracle for the fast conv."""
    n, c, h, w = x.shape
    co, k, _, ci = weight.shape
    if ci != c:
        raise DimensionError(f"channel mismatch: {c} vs {ci}")
    oh, ow = conv_out_hw(h, w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            for ch in range(c):
                                acc += (xp[b, ch, y * stride + i, xx * stride + j]
                                        * weight[o, i, j, ch])
                    out[b, o, y, xx] = acc + bias[o]
    return out


def conv2d_counted(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   stride: int = 1, padding: int = 0) -> tuple[np.ndarray, int]:
    """Loop convolution that counts one op per multiply-accumulate and one
    per bias add; the dense count reproduces c'*h'*w'*(k*k*c + 1)."""
    n, c, h, w = x.shape
    co, k, _, _ = weight.shape
    oh, ow = conv_out_hw(h, w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, co, oh, ow))
    ops = 0
    for b in range(n):
        for o in range(co):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            for ch in range(c):
                                acc += (xp[b, ch, y * stride + i, xx * stride + j]
                                        * weight[o, i, j, ch])
                                ops += 1
                    out[b, o, y, xx] = acc + bias[o]
                    ops += 1
    # the count is per frame of a single sample's batch entry
    return out, ops // n if n else 0


@dataclass
class GatedBlockWeights:
    """Plain-array snapshot of a gated block's conv/bn parameters (eval)."""
    w1: np.ndarray
    b1: np.ndarray
    bn1_scale: np.ndarray    # gamma / sqrt(running_var + eps)
    bn1_shift: np.ndarray    # beta - gamma * running_mean / sqrt(...)
    w2: np.ndarray
    b2: np.ndarray
    stride: int = 1
    padding: int = 1

    @classmethod
    def from_block(cls, block) -> "GatedBlockWeights":
        def affine(bn):
            inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
            return bn.gamma.data * inv, bn.beta.data - bn.gamma.data * bn.running_mean * inv

        s1, t1 = affine(block.bn1)
        return cls(w1=block.conv1.weight.data, b1=block.conv1.bias.data,
                   bn1_scale=s1, bn1_shift=t1,
                   w2=block.conv2.weight.data, b2=block.conv2.bias.data,
                   stride=block.conv1.stride, padding=block.conv1.padding)


def _corr_single_channel(xp: np.ndarray, w_ij: np.ndarray, stride: int,
                         oh: int, ow: int) -> np.ndarray:
    """Correlate one padded multi-channel frame with one filter (k,k,c)."""
    k = w_ij.shape[0]
    out = np.zeros((oh, ow))
    for y in range(oh):
        for xx in range(ow):
            patch = xp[:, y * stride:y * stride + k, xx * stride:xx * stride + k]
            out[y, xx] = (patch * w_ij.transpose(2, 0, 1)).sum()
    return out


def sparse_gated_block(frames_in: np.ndarray, decisions: np.ndarray,
                       wts: GatedBlockWeights) -> tuple[np.ndarray, float]:
    """Evaluate conv1 -> bn1(eval) -> relu -> fuse -> conv2 computing only
    what the policy needs, counting operations as executed.

    ``frames_in`` is one clip (T, c, h, w); ``decisions`` is (T, c').
    The upstream conv runs only for channels kept at t or reused at t+1;
    the downstream conv reads only non-skipped channels. Returns the final
    (T, c'', h'', w'') maps and the counted cost, which matches the analytic
    block cost exactly.
    """
    frames, c, h, w = frames_in.shape
    co, k, _, _ = wts.w1.shape
    if decisions.shape != (frames, co):
        raise DimensionError(f"decisions {decisions.shape}, expected {(frames, co)}")
    oh, ow = conv_out_hw(h, w, k, wts.stride, wts.padding)
    co2, k2, _, _ = wts.w2.shape
    oh2, ow2 = conv_out_hw(oh, ow, k2, 1, 1)

    ops = 0.0
    pad = wts.padding
    # raw post-activation maps, valid only where computed
    y_raw = np.zeros((frames, co, oh, ow))
    computed = np.zeros((frames, co), dtype=bool)
    for t in range(frames):
        need = decisions[t] == KEEP
        if t + 1 < frames:
            need = need | (decisions[t + 1] == REUSE)
        xp = np.pad(frames_in[t], ((0, 0), (pad, pad), (pad, pad)))
        for o in np.flatnonzero(need):
            raw = _corr_single_channel(xp, wts.w1[o], wts.stride, oh, ow) + wts.b1[o]
            ops += oh * ow * (k * k * c + 1)
            y_raw[t, o] = np.maximum(raw * wts.bn1_scale[o] + wts.bn1_shift[o], 0.0)
            computed[t, o] = True

    out = np.zeros((frames, co2, oh2, ow2))
    for t in range(frames):
        fused = np.zeros((co, oh, ow))
        for i in range(co):
            if decisions[t, i] == KEEP:
                assert computed[t, i]
                fused[i] = y_raw[t, i]
            elif decisions[t, i] == REUSE and t > 0:
                assert computed[t - 1, i]
                fused[i] = y_raw[t - 1, i]
            # reuse at t=0 and skip stay zero
        used = np.flatnonzero(decisions[t] != SKIP)
        fp = np.pad(fused[used], ((0, 0), (1, 1), (1, 1)))
        for o in range(co2):
            out[t, o] = (_corr_single_channel(fp, wts.w2[o][:, :, used], 1, oh2, ow2)
                         + wts.b2[o])
            ops += oh2 * ow2 * (len(used) * k2 * k2 + len(used) / co)
    return out, ops


def dense_masked_block(frames_in: np.ndarray, decisions: np.ndarray,
                       wts: GatedBlockWeights) -> np.ndarray:
    """The dense counterpart: compute everything, then mask/fuse by decision.
    Shares no code with the sparse path beyond the weight snapshot."""
    frames = frames_in.shape[0]
    pad = wts.padding
    co = wts.w1.shape[0]
    y_raw = []
    for t in range(frames):
        xp = np.pad(frames_in[t], ((0, 0), (pad, pad), (pad, pad)))
        oh, ow = conv_out_hw(frames_in.shape[2], frames_in.shape[3],
                             wts.w1.shape[1], wts.stride, pad)
        raw = np.stack([_corr_single_channel(xp, wts.w1[o], wts.stride, oh, ow)
                        + wts.b1[o] for o in range(co)])
        y_raw.append(np.maximum(raw * wts.bn1_scale[:, None, None]
                                + wts.bn1_shift[:, None, None], 0.0))
    outs = []
    for t in range(frames):
        fused = np.zeros_like(y_raw[t])
        for i in range(co):
            if decisions[t, i] == KEEP:
                fused[i] = y_raw[t][i]
            elif decisions[t, i] == REUSE and t > 0:
                fused[i] = y_raw[t - 1][i]
        fp = np.pad(fused, ((0, 0), (1, 1), (1, 1)))
        oh2, ow2 = conv_out_hw(fused.shape[1], fused.shape[2], wts.w2.shape[1], 1, 1)
        outs.append(np.stack([
            _corr_single_channel(fp, wts.w2[o], 1, oh2, ow2) + wts.b2[o]
            for o in range(wts.w2.shape[0])]))
    return np.stack(outs)
