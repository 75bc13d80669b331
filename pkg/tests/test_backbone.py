import numpy as np
import pytest

from mocosas.backbone import BackboneConfig, build, forward_features, load_backbone, parameter_count, save_backbone


def test_table_one_rows_full_width():
    cfg = BackboneConfig(depth_variant=18, in_channels=1, width_multiplier=1.0, input_size=224)
    bp = build(cfg, seed=0)
    assert parameter_count(bp, "stem.conv") == 3200
    assert parameter_count(bp, "stem.bn") == 128
    trace = []
    out = forward_features(bp, np.zeros((1, 1, 224, 224)), trace=trace)
    shapes = dict(trace)
    assert shapes["stem.conv"] == (64, 112, 112)
    assert shapes["stem.bn"] == (64, 112, 112)
    assert shapes["stem.relu"] == (64, 112, 112)
    assert shapes["stem.pool"] == (64, 56, 56)
    assert shapes["avgpool"] == (512, 1, 1)
    assert out.shape == (1, 512)
    assert np.all(np.isfinite(out.data))


def test_two_channel_stem():
    bp = build(BackboneConfig(in_channels=2, width_multiplier=1.0, input_size=224))
    assert parameter_count(bp, "stem.conv") == 6336


def test_no_classifier_parameters():
    bp = build(BackboneConfig())
    assert not any(k.startswith(("fc", "head", "classifier")) for k in bp.params)


@pytest.mark.parametrize("depth,embed", [(18, 128), (34, 128), (50, 512)])
@pytest.mark.parametrize("channels", [1, 2])
def test_grid_output_shapes(depth, embed, channels):
    cfg = BackboneConfig(depth_variant=depth, in_channels=channels, input_size=32)
    bp = build(cfg, seed=1)
    out = forward_features(bp, np.random.default_rng(0).random((2, channels, 32, 32)))
    assert out.shape == (2, embed) == (2, cfg.embed_dim)


def test_desk_parameter_totals():
    # frozen from the reference construction (stem bias, 1x1 projection shortcuts, bottleneck x4)
    counts = {d: parameter_count(build(BackboneConfig(depth_variant=d))) for d in (18, 34, 50)}
    assert counts == {18: 700544, 34: 1333696, 50: 1479424}


def test_seed_determinism_and_eval_purity():
    a, b = build(BackboneConfig(input_size=32), seed=3), build(BackboneConfig(input_size=32), seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    x = np.random.default_rng(1).random((1, 1, 32, 32))
    batch = np.concatenate([x, x])
    o1 = forward_features(a, batch).data
    o2 = forward_features(a, batch).data
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(o1[0], o1[1])


def test_kaiming_scale():
    bp = build(BackboneConfig(width_multiplier=1.0, input_size=224), seed=0)
    w = bp.params["stage3.block1.conv2.w"].data
    assert w.std() == pytest.approx(np.sqrt(2.0 / (w.shape[1] * 9)), rel=0.02)
    assert np.all(bp.params["stem.bn.gamma"].data == 1) and np.all(bp.params["stem.conv.b"].data == 0)


def test_shape_mismatch_rejected():
    bp = build(BackboneConfig(input_size=32))
    with pytest.raises(ValueError):
        forward_features(bp, np.zeros((1, 2, 32, 32)))
    with pytest.raises(ValueError):
        forward_features(bp, np.zeros((1, 1, 64, 64)))


def test_invalid_configs():
    for kw in (dict(depth_variant=20), dict(in_channels=3), dict(width_multiplier=0.05), dict(width_multiplier=1.5)):
        with pytest.raises(ValueError):
            BackboneConfig(**kw)


def test_save_load_roundtrip(tmp_path):
    bp = build(BackboneConfig(depth_variant=34, in_channels=2, input_size=32), seed=5)
    bp.buffers["stem.bn.running_mean"][:] = 0.25
    save_backbone(tmp_path / "b.msas", bp)
    back = load_backbone(tmp_path / "b.msas")
    assert back.config == bp.config
    for k in bp.params:
        np.testing.assert_array_equal(back.params[k].data, bp.params[k].data)
    np.testing.assert_array_equal(back.buffers["stem.bn.running_mean"], 0.25)
