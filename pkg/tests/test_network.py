"""Backbone assembly: shapes, parameter counts, stream threading, checkpoints."""

import hashlib

import numpy as np
import numpy.testing as npt
import pytest

from llanet.autodiff import GradGraph
from llanet.network import (CheckpointError, NetworkConfig, StageSpec, combined_module_forward,
                            config_digest, count_parameters, feature_shape, init_network,
                            load_checkpoint, module_plan, network_forward,
                            network_forward_graph, preset, save_checkpoint)
from llanet.verify import network_gradcheck


def batch_for(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    c, h, w = cfg.input_shape
    return rng.standard_normal((n, c, h, w))


def conv_params(in_ch, out_ch, k):
    return in_ch * out_ch * k * k  # backbone convolutions carry no bias


def bn_params(ch):
    return 2 * ch  # gamma + beta (running stats are not trainable)


def gate_params(ch, k=3):
    return ch * (2 * ch) * k * k + ch


def expected_trainable(cfg: NetworkConfig) -> int:
    """Recount the trainable parameters from the layer plan with plain arithmetic."""
    total = conv_params(cfg.input_shape[0], cfg.stem_channels, cfg.stem_kernel)
    total += bn_params(cfg.stem_channels)
    for m in module_plan(cfg):
        total += conv_params(m.in_channels, m.out_channels, 3) + bn_params(m.out_channels)
        total += conv_params(m.out_channels, m.out_channels, 3) + bn_params(m.out_channels)
        if m.projected:
            total += conv_params(m.in_channels, m.out_channels, 1) + bn_params(m.out_channels)
            total += conv_params(m.in_channels, m.out_channels, 1)  # f_pre alignment
        if cfg.attention == "learned":
            total += gate_params(m.out_channels, cfg.attention_kernel)
    feat = module_plan(cfg)[-1].out_channels
    return total + feat * cfg.num_classes + cfg.num_classes


def test_logits_shape_and_finiteness():
    for name in ("micro", "tiny"):
        cfg = preset(name)
        store = init_network(cfg)
        logits = network_forward(batch_for(cfg, n=3), store, cfg)
        assert logits.shape == (3, 7)
        assert np.all(np.isfinite(logits))


def test_init_is_deterministic():
    cfg = preset("tiny", seed=11)
    a, b = init_network(cfg), init_network(cfg)
    assert a.names() == b.names()
    for name in a.names():
        npt.assert_array_equal(a[name].value, b[name].value)


def test_seed_changes_weights():
    a = init_network(preset("tiny", seed=0))
    b = init_network(preset("tiny", seed=1))
    assert np.any(a["stem.conv.weight"].value != b["stem.conv.weight"].value)


def test_tiny_parameter_count_by_hand():
    cfg = preset("tiny")
    store = init_network(cfg)
    # stem: 3*8*9 + 16 = 232
    # s0b0 (8->8):  576+16+576+16 + gate 8*16*9+8=1160           -> 2344
    # s1b0 (8->16): 1152+32+2304+32 + 128+32 + 128 + gate 4624   -> 8432
    # head: 16*7+7 = 119
    assert count_parameters(store) == 232 + 2344 + 8432 + 119 == 11127
    assert count_parameters(store) == expected_trainable(cfg)


def test_full_size_preset_layout():
    cfg = preset("resnet18")
    assert feature_shape(cfg) == (512, 14, 14)
    assert count_parameters(init_network(cfg)) == expected_trainable(cfg)


def test_attention_off_removes_gate_parameters():
    on = count_parameters(init_network(preset("tiny", attention="learned")))
    off = count_parameters(init_network(preset("tiny", attention="off")))
    assert on - off == gate_params(8) + gate_params(16)


def test_frozen_gates_are_excluded_from_trainables():
    store = init_network(preset("tiny", attention="frozen"))
    assert "s0b0.attn.weight" in store
    assert not store["s0b0.attn.weight"].trainable
    trainable_names = {p.name for p in store.trainable()}
    assert not any(".attn." in n for n in trainable_names)


def test_previous_stream_threads_through_modules():
    cfg = preset("tiny")
    store = init_network(cfg)
    g = GradGraph()
    trace = network_forward_graph(g, batch_for(cfg), store, cfg, train=False)
    assert trace.modules[0].prev_out is trace.stem
    for prev, cur in zip(trace.modules, trace.modules[1:]):
        assert cur.prev_out is prev.refined
        assert cur.f_in is prev.refined


def test_alignment_only_when_shape_changes():
    cfg = preset("tiny")
    plan = module_plan(cfg)
    assert [m.projected for m in plan] == [False, True]
    store = init_network(cfg)
    assert "s1b0.align.weight" in store and "s0b0.align.weight" not in store

    g = GradGraph()
    trace = network_forward_graph(g, batch_for(cfg), store, cfg, train=False)
    # identity module: f_pre is literally the previous output node
    assert trace.modules[0].f_pre is trace.modules[0].prev_out
    # projected module: f_pre is a new node with the block's output shape
    m1 = trace.modules[1]
    assert m1.f_pre is not m1.prev_out
    assert m1.f_pre.value.shape == m1.f_cur.value.shape


def test_mask_shape_tracks_each_stage():
    cfg = preset("tiny")
    store = init_network(cfg)
    g = GradGraph()
    trace = network_forward_graph(g, batch_for(cfg), store, cfg, train=False)
    assert trace.modules[0].mask.value.shape == (2, 8, 32, 32)
    assert trace.modules[1].mask.value.shape == (2, 16, 16, 16)


def test_eval_forward_is_pure():
    cfg = preset("tiny")
    store = init_network(cfg)
    x = batch_for(cfg)
    before = store["s0b0.bn1.running_mean"].value.copy()
    first = network_forward(x, store, cfg, mode="eval")
    npt.assert_array_equal(store["s0b0.bn1.running_mean"].value, before)
    npt.assert_array_equal(network_forward(x, store, cfg, mode="eval"), first)


def test_train_forward_updates_running_stats():
    cfg = preset("tiny")
    store = init_network(cfg)
    before = store["stem.bn.running_mean"].value.copy()
    network_forward(batch_for(cfg), store, cfg, mode="train")
    assert np.any(store["stem.bn.running_mean"].value != before)


def test_attention_ablation_changes_logits():
    base = preset("tiny", attention="off")
    gated = preset("tiny", attention="learned")
    s_base, s_gated = init_network(base), init_network(gated)
    # backbone weights drawn identically up to the first gate; stem certainly matches
    npt.assert_array_equal(s_base["stem.conv.weight"].value, s_gated["stem.conv.weight"].value)
    x = batch_for(base)
    assert np.max(np.abs(network_forward(x, s_base, base) -
                         network_forward(x, s_gated, gated))) > 1e-8


def test_frozen_attention_halves_block_outputs():
    cfg = preset("tiny", attention="frozen")
    store = init_network(cfg)
    g = GradGraph()
    trace = network_forward_graph(g, batch_for(cfg), store, cfg, train=False)
    for mod in trace.modules:
        npt.assert_array_equal(mod.mask.value, np.full_like(mod.mask.value, 0.5))
        npt.assert_allclose(mod.refined.value, 0.5 * mod.f_cur.value, atol=1e-15)


def test_off_mode_passes_block_output_through():
    cfg = preset("tiny", attention="off")
    store = init_network(cfg)
    g = GradGraph()
    trace = network_forward_graph(g, batch_for(cfg), store, cfg, train=False)
    for mod in trace.modules:
        assert mod.mask is None
        assert mod.refined is mod.f_cur


def test_combined_module_standalone():
    cfg = preset("tiny")
    store = init_network(cfg)
    rng = np.random.default_rng(3)
    f = rng.standard_normal((1, 8, 32, 32))
    refined, mask = combined_module_forward(f, f, store, cfg, module_index=0)
    assert refined.shape == (1, 8, 32, 32) and mask.shape == (1, 8, 32, 32)
    assert np.all((mask > 0) & (mask < 1))
    # stage boundary halves the spatial dims and doubles the channels
    refined1, mask1 = combined_module_forward(refined, refined, store, cfg, module_index=1)
    assert refined1.shape == (1, 16, 16, 16) and mask1.shape == (1, 16, 16, 16)
    with pytest.raises(IndexError):
        combined_module_forward(f, f, store, cfg, module_index=2)


def test_variable_input_resolution():
    # evaluation crops are smaller than the nominal training size
    cfg = preset("tiny")
    store = init_network(cfg)
    logits = network_forward(np.zeros((1, 3, 28, 28)), store, cfg)
    assert logits.shape == (1, 7)
    with pytest.raises(ValueError):
        network_forward(np.zeros((1, 4, 32, 32)), store, cfg)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = preset("tiny", seed=5)
    store = init_network(cfg)
    network_forward(batch_for(cfg), store, cfg, mode="train")  # move running stats off init
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, store, cfg)

    fresh = init_network(cfg)
    fresh["stem.conv.weight"].value[...] = 0.0
    load_checkpoint(path, fresh, cfg)
    for p in store:
        npt.assert_array_equal(fresh[p.name].value, p.value)
        assert fresh[p.name].trainable == p.trainable
        assert fresh[p.name].decay_exempt == p.decay_exempt


def test_checkpoint_load_keeps_running_stat_views_alive(tmp_path):
    cfg = preset("micro")
    store = init_network(cfg)
    network_forward(batch_for(cfg), store, cfg, mode="train")
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, store, cfg)

    fresh = init_network(cfg)
    view = fresh.running_stats("stem.bn")  # grabbed before the load
    load_checkpoint(path, fresh, cfg)
    npt.assert_array_equal(view.mean, store["stem.bn.running_mean"].value)


def test_checkpoint_rejects_other_architectures(tmp_path):
    cfg = preset("tiny")
    store = init_network(cfg)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, store, cfg)
    other = preset("tiny", attention="off")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, init_network(other), other)
    # non-strict skips the digest but still checks the parameter inventory
    with pytest.raises(CheckpointError):
        load_checkpoint(path, init_network(other), other, strict=False)


def test_checkpoint_rejects_truncation_and_garbage(tmp_path):
    cfg = preset("micro")
    store = init_network(cfg)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, store, cfg)
    data = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.ckpt", init_network(cfg), cfg)
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all\n" + data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt", init_network(cfg), cfg)


def test_checkpoint_reruns_identical_bytes(tmp_path):
    cfg = preset("micro", seed=2)
    store = init_network(cfg)
    save_checkpoint(tmp_path / "a.ckpt", store, cfg)
    save_checkpoint(tmp_path / "b.ckpt", store, cfg)
    ha = hashlib.sha256((tmp_path / "a.ckpt").read_bytes()).hexdigest()
    hb = hashlib.sha256((tmp_path / "b.ckpt").read_bytes()).hexdigest()
    assert ha == hb


def test_config_digest_tracks_every_field():
    base = preset("tiny")
    assert config_digest(base) == config_digest(preset("tiny"))
    for variant in (preset("tiny", seed=1), preset("tiny", attention="off"),
                    preset("tiny", num_classes=5), preset("micro")):
        assert config_digest(variant) != config_digest(base)


def test_config_validation():
    with pytest.raises(ValueError):
        preset("huge")
    with pytest.raises(ValueError):
        preset("tiny", attention="sometimes")
    with pytest.raises(ValueError):
        NetworkConfig(input_shape=(3, 8, 8), stem_channels=4,
                      stages=(StageSpec(1, 4, 1),), attention_kernel=2)
    with pytest.raises(ValueError):
        NetworkConfig(input_shape=(3, 8, 8), stem_channels=4, stages=())


def test_end_to_end_gradient_check():
    _, report = network_gradcheck(seed=0, eps=1e-5)
    assert report.max_error < 1e-4
    assert report.checked > 100
