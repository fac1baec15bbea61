"""Assembled-network tests: shapes, identities, orderings, replay, checkpoints."""

import numpy as np
import pytest

from graphskip.errors import ConfigError, ShapeError
from graphskip.gradcheck import grad_check
from graphskip.model import ModelConfig, SkipNet
from graphskip.serialization import load_checkpoint, save_checkpoint
from graphskip.tensor import Tensor, tsum


def small_config(**overrides):
    base = dict(input_size=(64, 64), encoder_channels=(8, 12, 16, 20),
                reduced_channels=8, scale=3, k_neighbors=5, conv1d_width=3,
                m_channels=8, repetitions=1, gnn_mode="s4", dtype="float64",
                seed=3)
    base.update(overrides)
    return ModelConfig(**base)


def random_image(shape=(2, 3, 64, 64), seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape).astype(dtype))


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(input_size=(60, 64))
    with pytest.raises(ConfigError):
        small_config(scale=6)
    with pytest.raises(ConfigError):
        small_config(m_channels=33)
    with pytest.raises(ConfigError):
        small_config(m_channels=0)
    with pytest.raises(ConfigError):
        small_config(conv1d_width=4)
    with pytest.raises(ConfigError):
        small_config(gnn_mode="s9")
    with pytest.raises(ConfigError):
        small_config(scale=5, k_neighbors=5)
    # same K is fine once the grid is big enough or the branch is bypassed
    small_config(scale=5, k_neighbors=3)
    small_config(scale=5, k_neighbors=5, gnn_mode="s0")


def test_config_dict_round_trip():
    cfg = small_config(m_channels=6, gnn_mode="s2")
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.target_size == (8, 8)


def test_decoder_width_defaults_to_reduced():
    assert small_config().decoder_channels == 8
    assert small_config(decoder_channels=5).decoder_channels == 5


def test_encoder_pyramid_shapes():
    cfg = ModelConfig(encoder_channels=(16, 32, 64, 128), reduced_channels=64,
                      dtype="float64")
    net = SkipNet(cfg)
    pyramid = net.encode(random_image((2, 3, 64, 64)), "train")
    shapes = [t.shape for t in pyramid]
    assert shapes == [(2, 16, 16, 16), (2, 32, 8, 8),
                      (2, 64, 4, 4), (2, 128, 2, 2)]


def test_encoder_rejects_bad_input():
    net = SkipNet(small_config())
    with pytest.raises(ShapeError):
        net.encode(Tensor(np.zeros((2, 1, 64, 64))), "train")
    with pytest.raises(ShapeError):
        net.encode(Tensor(np.zeros((2, 3, 32, 64))), "train")


def test_param_count_oracle():
    cfg = small_config()
    net = SkipNet(cfg)

    def conv_bn(cin, cout):
        return 9 * cin * cout + 2 * cout

    c1, c2, c3, c4 = cfg.encoder_channels
    cr, dc = cfg.reduced_channels, cfg.decoder_channels
    n = cfg.target_size[0] * cfg.target_size[1]
    ch = 4 * cr
    expected = conv_bn(3, c1) + conv_bn(c1, c1)              # stem
    expected += 2 * conv_bn(c1, c1)                          # stage 1
    expected += conv_bn(c1, c2) + conv_bn(c2, c2)
    expected += conv_bn(c2, c3) + conv_bn(c3, c3)
    expected += conv_bn(c3, c4) + conv_bn(c4, c4)
    expected += sum(cr * ci + cr for ci in (c1, c2, c3, c4))  # projections
    expected += (ch * ch + 2 * ch) + n * ch                   # pre conv+bn, pos
    expected += ch * 2 * ch + ch                              # update
    expected += cfg.conv1d_width                              # node attention
    expected += (ch * ch + 2 * ch) * 3                        # post, ffn1, ffn2
    expected += cfg.m_channels + 1                            # efs projection
    expected += conv_bn(2 * cr, dc) + conv_bn(dc, dc)         # decoder 0
    expected += 2 * (conv_bn(cr + dc, dc) + conv_bn(dc, dc))  # decoder 1, 2
    expected += 2 * (cr + 1) + 6 * (dc + 1)                   # eight heads
    assert net.param_count() == expected


def test_param_names_unique_and_prefixed():
    net = SkipNet(small_config())
    names = [name for name, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    assert "enc.stem.0.weight" in names
    assert "pre.proj4.bias" in names
    assert "gnn.0.update.weight" in names
    assert "efs.proj.weight" in names
    assert "dec.2.1.bn.beta" in names
    assert "head.region4.bias" in names


def test_preprocess_concat_width_and_matching_slab():
    cfg = ModelConfig(encoder_channels=(16, 32, 64, 128), reduced_channels=64,
                      scale=3, dtype="float64")
    net = SkipNet(cfg)
    pyramid = net.encode(random_image((2, 3, 64, 64), seed=5), "train")
    fprime, resized, f_c = net.preprocess(pyramid)
    assert f_c.shape == (2, 256, 8, 8)
    assert [fp.shape[2:] for fp in fprime] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    # stage 2 already lives on the target grid, so its slab is an exact copy
    assert resized[1] is fprime[1]
    assert np.array_equal(f_c.data[:, 64:128], fprime[1].data)
    for i, r in enumerate(resized):
        assert np.array_equal(f_c.data[:, 64 * i:64 * (i + 1)], r.data)


def test_postprocess_zero_branch_is_identity():
    net = SkipNet(small_config())
    pyramid = net.encode(random_image(seed=6), "train")
    fprime, _, f_c = net.preprocess(pyramid)
    zeros = Tensor(np.zeros(f_c.shape))
    fhat = net.postprocess(zeros, fprime)
    for fp, fh in zip(fprime, fhat):
        assert np.array_equal(fh.data, fp.data)


def test_postprocess_composition_oracle():
    from graphskip.nn import bilinear_resize
    from graphskip.tensor import narrow
    net = SkipNet(small_config())
    pyramid = net.encode(random_image(seed=7), "train")
    fprime, _, f_c = net.preprocess(pyramid)
    rng = np.random.default_rng(8)
    fused = Tensor(rng.standard_normal(f_c.shape))
    fhat = net.postprocess(fused, fprime)
    cr = net.config.reduced_channels
    for i, (fp, fh) in enumerate(zip(fprime, fhat)):
        slab = narrow(fused, 1, i * cr, cr)
        want = fp.data + bilinear_resize(slab, fp.shape[2:]).data
        assert np.allclose(fh.data, want, rtol=0, atol=0)
    with pytest.raises(ShapeError):
        net.postprocess(Tensor(np.zeros((2, 3, 8, 8))), fprime)


def test_forward_shapes_range_and_determinism():
    net = SkipNet(small_config())
    x = random_image(seed=9)
    outs = net.forward(x, "train")
    assert len(outs) == 4
    for region, boundary in outs:
        assert region.shape == (2, 1, 64, 64)
        assert boundary.shape == (2, 1, 64, 64)
        for t in (region, boundary):
            assert np.all(t.data > 0.0) and np.all(t.data < 1.0)
    again = net.forward(x, "train")
    for (r1, b1), (r2, b2) in zip(outs, again):
        assert np.array_equal(r1.data, r2.data)
        assert np.array_equal(b1.data, b2.data)
    with pytest.raises(ConfigError):
        net.forward(x, "predict")


def test_decoder_walks_back_up_the_pyramid():
    net = SkipNet(small_config())
    x = random_image(seed=10)
    pyramid = net.encode(x, "train")
    fprime, resized, f_c = net.preprocess(pyramid)
    cap = {}
    fused = net._branch(resized, f_c, "train", None, cap)
    fhat = net.postprocess(fused, fprime)
    states = [fhat[3]]
    for i, block in enumerate(net.decoder):
        states.append(block.forward(fhat[2 - i], states[-1], "train"))
    assert [s.shape[2:] for s in states] == [(2, 2), (4, 4), (8, 8), (16, 16)]


def test_mode_s0_matches_hand_built_pipeline():
    cfg = small_config(gnn_mode="s0")
    net = SkipNet(cfg)
    assert net.gnn is None and net.efs_w is None
    x = random_image(seed=11)
    outs = net.forward(x, "eval")

    from graphskip.nn import bilinear_resize, conv2d_1x1
    from graphskip.tensor import sigmoid
    pyramid = net.encode(x, "eval")
    fprime, _, f_c = net.preprocess(pyramid)
    fhat = net.postprocess(f_c, fprime)
    states = [fhat[3]]
    for i, block in enumerate(net.decoder):
        states.append(block.forward(fhat[2 - i], states[-1], "eval"))
    for i, (region, _) in enumerate(outs):
        rw, rb = net.head_w[2 * i], net.head_b[2 * i]
        want = bilinear_resize(sigmoid(conv2d_1x1(states[i], rw.value,
                                                  rb.value)), (64, 64))
        assert np.array_equal(region.data, want.data)


def test_zero_branch_runs_and_differs():
    x = random_image(seed=12)
    plain = SkipNet(small_config())
    zeroed = SkipNet(small_config(zero_branch=True))
    assert zeroed.param_count() == plain.param_count()
    a = plain.forward(x, "eval")[3][0].data
    b = zeroed.forward(x, "eval")[3][0].data
    assert np.all(np.isfinite(b))
    assert not np.array_equal(a, b)


def test_mode_param_count_orderings():
    counts = {m: SkipNet(small_config(gnn_mode=m)).param_count()
              for m in ("s0", "s1", "s2", "s3", "s4")}
    assert counts["s0"] < counts["s1"] <= counts["s2"]
    assert counts["s2"] < counts["s3"] <= counts["s4"]
    # node attention costs exactly one length-k conv per repetition
    assert counts["s2"] - counts["s1"] == 3
    assert counts["s4"] - counts["s3"] == 3


def test_repetitions_scale_gnn_params():
    one = SkipNet(small_config()).param_count()
    base = SkipNet(small_config(gnn_mode="s0")).param_count()
    efs = 8 + 1
    three = SkipNet(small_config(repetitions=3)).param_count()
    assert three - base - efs == 3 * (one - base - efs)


def test_single_scale_modes_operate_on_coarsest_slab():
    cfg = small_config(gnn_mode="s1")
    net = SkipNet(cfg)
    # the graph block is built at the reduced width, not the fused width
    assert net.gnn.stages[0].channels == cfg.reduced_channels
    cap = {}
    net.forward(random_image(seed=13), "train", capture=cap)
    assert cap["graphs"][0][0].n_nodes == 64
    wide = SkipNet(small_config(gnn_mode="s3"))
    assert wide.gnn.stages[0].channels == 4 * cfg.reduced_channels


def test_frozen_choices_replay_is_bitwise():
    net = SkipNet(small_config())
    x = random_image(seed=14)
    cap = {}
    outs = net.forward(x, "train", capture=cap)
    replay = net.forward(x, "train", choices={"graphs": cap["graphs"],
                                              "efs_indices": cap["efs_indices"]})
    for (r1, b1), (r2, b2) in zip(outs, replay):
        assert np.array_equal(r1.data, r2.data)
        assert np.array_equal(b1.data, b2.data)
    assert cap["efs_indices"].shape == (2, 8)
    assert cap["efs_attention"].shape == (2, 1, 8, 8)


def test_full_model_gradients_directional():
    cfg = ModelConfig(input_size=(32, 32), encoder_channels=(4, 6, 8, 10),
                      reduced_channels=4, scale=3, k_neighbors=5,
                      conv1d_width=3, m_channels=6, gnn_mode="s4",
                      dtype="float64", seed=1)
    net = SkipNet(cfg)
    x = random_image((2, 3, 32, 32), seed=15)
    cap = {}
    net.forward(x, "train", capture=cap)
    choices = {"graphs": cap["graphs"], "efs_indices": cap["efs_indices"]}
    rng = np.random.default_rng(16)
    weights = [Tensor(rng.standard_normal((2, 1, 32, 32))) for _ in range(8)]

    def loss_fn():
        outs = net.forward(x, "train", choices=choices)
        total = None
        for (r, b), wr, wb in zip(outs, weights[0::2], weights[1::2]):
            term = tsum(r * wr) + tsum(b * wb)
            total = term if total is None else total + term
        return total

    report = grad_check(loss_fn, net.parameters(), mode="directional", seed=2)
    assert report["max_rel_err"] < 1e-5, report["per_param"]


def test_checkpoint_round_trip(tmp_path):
    net = SkipNet(small_config(seed=21))
    x = random_image(seed=17)
    net.forward(x, "train")  # move the BN running stats off their init
    before = net.forward(x, "eval")[3][0].data.copy()
    save_checkpoint(tmp_path / "ckpt", net, extra={"epoch": 4})

    other = SkipNet(small_config(seed=22))
    assert not np.array_equal(other.forward(x, "eval")[3][0].data, before)
    manifest = load_checkpoint(tmp_path / "ckpt", other)
    assert manifest["epoch"] == 4
    after = other.forward(x, "eval")[3][0].data
    assert np.array_equal(after, before)


def test_seed_controls_init():
    a = SkipNet(small_config(seed=1))
    b = SkipNet(small_config(seed=1))
    c = SkipNet(small_config(seed=2))
    wa = a.parameters()[0].value.data
    assert np.array_equal(wa, b.parameters()[0].value.data)
    assert not np.array_equal(wa, c.parameters()[0].value.data)
