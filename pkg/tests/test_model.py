import numpy as np
import pytest

from fusegate import tensor as T
from fusegate.tensor import Tensor
from fusegate.errors import ConfigError, ContractError
from fusegate.model import (BaselinePolicy, ToyNet, ToyNetConfig,
                            apply_baseline_policy, consensus, count_params,
                            default_gated)

SLIM = dict(frames=4, in_channels=1, stem_channels=4,
            blocks=((4, 4, 1), (4, 8, 2)), variant="plain")


def _slim_net(num_classes=2, gated=(True, True), seed=0, **kw):
    args = {**SLIM, **kw}
    return ToyNet(ToyNetConfig(num_classes=num_classes, gated=gated, **args), seed)


def test_consensus_examples():
    out = consensus(Tensor([[1.0, 3.0], [3.0, 1.0]]))
    assert np.allclose(out.data, [2.0, 2.0])
    single = consensus(Tensor([[4.0, 7.0]]))
    assert np.allclose(single.data, [4.0, 7.0])


def test_consensus_frame_permutation_invariant():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    assert np.allclose(consensus(Tensor(logits)).data,
                       consensus(Tensor(logits[perm])).data)


def test_count_params_examples():
    from fusegate.layers import LinearLayer, Conv2dLayer
    lin = LinearLayer(10, 5)
    assert sum(p.data.size for p in lin.params("x").values()) == 55
    conv = Conv2dLayer(3, 8, 3)
    assert sum(p.data.size for p in conv.params("x").values()) == 8 * 3 * 3 * 3 + 8


def test_gated_params_are_plain_plus_policies():
    gated = _slim_net(gated=(True, True))
    plain = _slim_net(gated=(False, False))
    policy_sizes = sum(p.data.size for n, p in gated.params().items()
                       if ".policy." in n)
    assert count_params(gated) == count_params(plain) + policy_sizes
    assert policy_sizes > 0


def test_config_validation():
    with pytest.raises(ConfigError):
        ToyNetConfig(num_classes=2, stem_channels=8,
                     blocks=((16, 16, 1),))  # stem mismatch
    with pytest.raises(ConfigError):
        ToyNetConfig(num_classes=2, stem_channels=16,
                     blocks=((16, 16, 1), (32, 32, 1)))  # chain mismatch
    with pytest.raises(ConfigError):
        ToyNetConfig(num_classes=2, variant="nope")
    # shift-last forces gating on the last quarter only
    with pytest.raises(ConfigError):
        ToyNetConfig(num_classes=2, variant="shift-last",
                     gated=(True, True, True, True))
    cfg = ToyNetConfig(num_classes=2, variant="shift-last")
    assert cfg.gated == (False, False, False, True)


def test_default_gated_shift_last_quarter():
    assert default_gated("shift-last", 4) == (False, False, False, True)
    assert default_gated("shift-last", 5) == (False, False, False, True, True)
    assert default_gated("plain", 3) == (False, False, False)


def test_forward_frame_count_mismatch():
    net = _slim_net()
    with pytest.raises(ContractError):
        net.forward_batch(np.zeros((1, 3, 1, 16, 16)), mode="eval")


def test_forward_clip_shapes_plain_t1():
    net = ToyNet(ToyNetConfig(num_classes=3, frames=1, in_channels=1,
                              stem_channels=4, blocks=((4, 4, 1),),
                              gated=(False,), variant="plain"), seed=1)
    clip = np.random.default_rng(2).random((1, 1, 16, 16))
    logits, trace, cost = net.forward_clip(clip, mode="eval")
    assert logits.shape == (1, 3)
    assert trace.gates == []
    assert cost.mean_util == 1.0


def test_all_keep_gated_equals_plain():
    rng = np.random.default_rng(3)
    gated = _slim_net(gated=(True, True), seed=4)
    plain = _slim_net(gated=(False, False), seed=4)
    shared = {k: v.data for k, v in gated.params().items() if ".policy." not in k}
    plain.load_params(shared, strict=False)
    force_keep = BaselinePolicy(kind="random", dist=(1.0, 0.0, 0.0))
    for _ in range(5):
        clips = rng.random((2, 4, 1, 16, 16))
        rg = gated.forward_batch(clips, rng=np.random.default_rng(0), mode="eval",
                                 policy=force_keep)
        rp = plain.forward_batch(clips, mode="eval")
        assert np.abs(rg.video_logits.data - rp.video_logits.data).max() < 1e-12
        assert rg.cost.mean_flops == rp.cost.mean_flops


def test_plain_cost_is_input_independent_and_matches_table():
    net = _slim_net(gated=(False, False))
    rng = np.random.default_rng(5)
    r1 = net.forward_batch(rng.random((2, 4, 1, 16, 16)), mode="eval")
    r2 = net.forward_batch(rng.random((2, 4, 1, 16, 16)) * 3.0, mode="eval")
    assert r1.cost.mean_flops == r2.cost.mean_flops
    table = net.conv_cost_table(16, 16)
    assert r1.cost.mean_flops == table["per_frame_total"] * 4


def test_plain_consensus_invariant_to_frame_permutation_gated_not():
    rng = np.random.default_rng(6)
    clips = rng.random((1, 4, 1, 16, 16))
    perm = np.array([2, 0, 3, 1])
    permuted = clips[:, perm]

    plain = _slim_net(gated=(False, False), seed=7)
    p1 = plain.forward_batch(clips, mode="eval").video_logits.data
    p2 = plain.forward_batch(permuted, mode="eval").video_logits.data
    assert np.allclose(p1, p2, atol=1e-12)

    gated = _slim_net(gated=(True, True), seed=7)
    force_reuse = BaselinePolicy(kind="random", dist=(0.0, 1.0, 0.0))
    g1 = gated.forward_batch(clips, rng=np.random.default_rng(0), mode="eval",
                             policy=force_reuse).video_logits.data
    g2 = gated.forward_batch(permuted, rng=np.random.default_rng(0), mode="eval",
                             policy=force_reuse).video_logits.data
    assert np.abs(g1 - g2).max() > 1e-6


def test_duplicate_frames_all_reuse_matches_first_frame_raw():
    rng = np.random.default_rng(8)
    net = ToyNet(ToyNetConfig(num_classes=2, frames=3, in_channels=1,
                              stem_channels=4, blocks=((4, 4, 1),),
                              gated=(True,), variant="plain"), seed=9)
    frame = rng.random((1, 1, 16, 16))
    clips = np.repeat(frame[None], 3, axis=1)

    block = net.blocks[0]
    captured = {}
    orig_bn1 = block.bn1

    class Tap:
        def __call__(self, x, training):
            out = T.relu(orig_bn1(x, training))
            captured.setdefault("y_raw", out.data)
            return out  # relu applied here; outer relu is idempotent

        def params(self, prefix):
            return orig_bn1.params(prefix)

        def state(self, prefix):
            return orig_bn1.state(prefix)

    block.bn1 = Tap()
    res = net.forward_batch(clips, rng=np.random.default_rng(1), mode="eval",
                            policy=BaselinePolicy(kind="random", dist=(0, 1.0, 0)))
    y_raw = captured["y_raw"].reshape(1, 3, 4, 16, 16)
    # identical frames: raw maps equal; fused at t>0 equals the t=0 raw map
    assert np.allclose(y_raw[0, 0], y_raw[0, 1], atol=1e-12)
    dec = res.trace.gates[0].decisions
    assert (dec == 1).all()


def test_random_policy_all_keep_is_identity_fusion():
    rng = np.random.default_rng(10)
    y_t = Tensor(rng.normal(size=(2, 4, 3, 3)))
    y_prev = Tensor(rng.normal(size=(2, 4, 3, 3)))
    dec, fused = apply_baseline_policy(
        BaselinePolicy(kind="random", dist=(1.0, 0.0, 0.0)), y_t, y_prev,
        np.random.default_rng(0))
    assert (dec == 0).all()
    assert np.array_equal(fused.data, y_t.data)


def test_threshold_policy_examples():
    y = np.zeros((1, 4, 1, 1))
    y[0, :, 0, 0] = [3.0, 1.0, 4.0, 1.0]
    y_t = Tensor(y)
    y_prev = Tensor(np.ones_like(y))
    dec, fused = apply_baseline_policy(
        BaselinePolicy(kind="threshold", keep_ratio=0.5), y_t, y_prev, None)
    assert np.array_equal(dec[0], [0, 2, 0, 2])  # channels {2,0} kept
    assert np.array_equal(fused.data.ravel(), [3.0, 0.0, 4.0, 0.0])
    dec_all, fused_all = apply_baseline_policy(
        BaselinePolicy(kind="threshold", keep_ratio=1.0), y_t, y_prev, None)
    assert (dec_all == 0).all()
    assert np.array_equal(fused_all.data, y_t.data)


def test_threshold_tie_break_lower_index():
    y = np.zeros((1, 4, 1, 1))
    y[0, :, 0, 0] = [2.0, 2.0, 2.0, 2.0]
    dec, _ = apply_baseline_policy(
        BaselinePolicy(kind="threshold", keep_ratio=0.5), Tensor(y),
        Tensor(np.zeros_like(y)), None)
    assert np.array_equal(dec[0], [0, 0, 2, 2])


def test_baseline_policy_validation():
    with pytest.raises(ContractError):
        BaselinePolicy(kind="random", dist=(0.5, 0.2, 0.2))
    with pytest.raises(ContractError):
        BaselinePolicy(kind="threshold", keep_ratio=0.0)
    with pytest.raises(ConfigError):
        BaselinePolicy(kind="bogus")


def test_eval_determinism_learned_policy():
    rng = np.random.default_rng(11)
    net = _slim_net(gated=(True, True), seed=12)
    # make the policy non-trivial
    for name, p in net.params().items():
        if ".policy.fc2" in name:
            p.assign_(rng.normal(scale=0.5, size=p.data.shape))
    clips = rng.random((2, 4, 1, 16, 16))
    r1 = net.forward_batch(clips, mode="eval")
    r2 = net.forward_batch(clips, mode="eval")
    assert np.array_equal(r1.video_logits.data, r2.video_logits.data)
    assert np.array_equal(r1.trace.gates[0].decisions, r2.trace.gates[0].decisions)
    assert r1.cost.mean_flops == r2.cost.mean_flops


def test_train_mode_forward_value_matches_hard_decisions():
    # straight-through: gated forward values identical to case analysis
    rng = np.random.default_rng(13)
    net = _slim_net(gated=(True, True), seed=14)
    for name, p in net.params().items():
        if ".policy.fc2" in name:
            p.assign_(rng.normal(scale=0.3, size=p.data.shape))
    clips = rng.random((2, 4, 1, 16, 16))
    res = net.forward_batch(clips, rng=np.random.default_rng(7), mode="train")
    hard_total = res.cost.per_sample
    for g, gate_cost in zip(res.trace.gates, res.cost.gates):
        from fusegate.gating import block_cost
        recomputed = np.array([block_cost(d, gate_cost.m_x, gate_cost.m_y)
                               for d in g.decisions])
        assert np.allclose(recomputed, gate_cost.hard, atol=1e-9)
    # the differentiable per-gate costs forward exactly the hard utilization
    for rel, gate_cost in zip(res.cost.relaxed, res.cost.gates):
        assert abs(rel.item() - gate_cost.util.mean()) < 1e-12
    assert np.all(hard_total >= 0)


def test_checkpoint_roundtrip(tmp_path):
    from fusegate.checkpoint import (load_checkpoint, net_blobs, save_checkpoint)
    net = _slim_net(gated=(True, False), seed=15)
    path = tmp_path / "m.afck"
    save_checkpoint(path, net_blobs(net), "model.variant=plain\n")
    blobs, echo = load_checkpoint(path)
    assert echo == "model.variant=plain\n"
    for name, arr in net_blobs(net).items():
        assert np.array_equal(blobs[name], arr), name
    # byte-identical re-serialization
    path2 = tmp_path / "m2.afck"
    save_checkpoint(path2, blobs, echo)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_restores_forward(tmp_path):
    from fusegate.checkpoint import load_checkpoint, net_blobs, save_checkpoint
    rng = np.random.default_rng(16)
    net = _slim_net(gated=(True, True), seed=17)
    clips = rng.random((1, 4, 1, 16, 16))
    net.forward_batch(clips, rng=np.random.default_rng(0), mode="train")  # move BN stats
    ref = net.forward_batch(clips, mode="eval").video_logits.data
    path = tmp_path / "m.afck"
    save_checkpoint(path, net_blobs(net), "")
    fresh = _slim_net(gated=(True, True), seed=999)
    blobs, _ = load_checkpoint(path)
    fresh.load_params(blobs)
    assert np.array_equal(fresh.forward_batch(clips, mode="eval").video_logits.data,
                          ref)


def test_checkpoint_bad_magic(tmp_path):
    from fusegate.checkpoint import load_checkpoint
    from fusegate.errors import FormatError
    p = tmp_path / "junk.afck"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_shift_variant_forward_and_train_step():
    from fusegate.tensor import Tape
    from fusegate.train import loss_terms
    rng = np.random.default_rng(20)
    for variant, gated in (("shift", (True, True)), ("shift-last", (False, True))):
        cfg = ToyNetConfig(num_classes=2, frames=4, in_channels=1,
                           stem_channels=4, blocks=((4, 4, 1), (4, 8, 2)),
                           gated=gated, variant=variant, shift_fraction=0.25)
        net = ToyNet(cfg, seed=21)
        clips = rng.random((2, 4, 1, 16, 16))
        res_e = net.forward_batch(clips, mode="eval")
        assert res_e.video_logits.shape == (2, 2)
        tape = Tape()
        for p in net.params().values():
            tape.watch(p)
        res = net.forward_batch(clips, rng=np.random.default_rng(0), mode="train")
        total, _, _ = loss_terms(res.video_logits, np.array([0, 1]),
                                 res.cost.relaxed or [], 0.1)
        tape.backward(total)
        grads = [p.grad for p in net.params().values() if p.grad is not None]
        assert grads and all(np.isfinite(g).all() for g in grads)
        tape.reset()


def test_shift_variant_couples_frames():
    # with temporal shift, even an ungated net sees neighbouring frames
    rng = np.random.default_rng(22)
    cfg = ToyNetConfig(num_classes=2, frames=4, in_channels=1, stem_channels=4,
                       blocks=((4, 4, 1), (4, 8, 2)), gated=(False, False),
                       variant="shift", shift_fraction=0.25)
    net = ToyNet(cfg, seed=23)
    clips = rng.random((1, 4, 1, 16, 16))
    perm = clips[:, [2, 0, 3, 1]]
    a = net.forward_batch(clips, mode="eval").video_logits.data
    b = net.forward_batch(perm, mode="eval").video_logits.data
    assert np.abs(a - b).max() > 1e-9
