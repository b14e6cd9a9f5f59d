from fractions import Fraction

import numpy as np
import pytest

from botkit import functional as F
from botkit.attention import MhsaLayer
from botkit.botnet import (
    BotNet50Config,
    Bottleneck,
    BottleneckSpec,
    bot_block_forward,
    bottleneck_forward,
    build_botnet50,
    forward,
    replicate_channels,
)
from botkit.checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint
from botkit.gradcheck import grad_check
from botkit.oracles import botnet50_param_count
from botkit.tensor import Tensor, no_grad

SMALL = BotNet50Config(width_multiplier=Fraction(1, 8), input_size=32)


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture(scope="module")
def default_model():
    return build_botnet50(seed=0)


def test_spec_invariants():
    with pytest.raises(ValueError, match="4 x mid"):
        BottleneckSpec(64, 64, 128)
    with pytest.raises(ValueError):
        BottleneckSpec(64, 64, 256, stride=3)
    with pytest.raises(ValueError, match="divisible by 32"):
        BotNet50Config(input_size=100)
    with pytest.raises(ValueError, match="non-integer"):
        BotNet50Config(width_multiplier=Fraction(1, 3))


@pytest.mark.slow
def test_default_forward_stage_sizes(default_model):
    x = np.random.default_rng(0).normal(size=(1, 3, 224, 224))
    with no_grad():
        logits, feats = default_model.eval()(x, return_stages=True)
    assert [feats[k].shape[-1] for k in ("c1", "c2", "c3", "c4", "c5")] == [112, 56, 28, 14, 7]
    assert feats["c5"].shape[1] == 2048
    assert logits.shape == (1, 2)


def test_exactly_three_mhsa_layers_in_c5(default_model):
    assert len(default_model.mhsa_layers()) == 3
    assert all(b.spec.spatial_op == "mhsa" for b in default_model.c5)
    for name in ("c2", "c3", "c4"):
        assert all(b.spec.spatial_op == "conv3x3" for b in getattr(default_model, name))
    assert [len(s) for s in default_model.stages()] == [3, 4, 6, 3]


def test_parameter_count_matches_closed_form(default_model):
    assert default_model.num_parameters() == botnet50_param_count() == 18_800_322


def test_parameter_count_from_resnet50_arithmetic():
    # torchvision-style ResNet-50 has 25,557,032 parameters with a 1000-way head
    resnet50 = 25_557_032
    head_1000 = 2048 * 1000 + 1000
    head_2 = 2048 * 2 + 2
    c5_convs = 3 * (3 * 3 * 512 * 512)
    c5_qkv = 3 * (3 * 512 * 512)
    c5_tables = (27 + 27) * 64 + 2 * (13 + 13) * 64  # first block attends at 14x14, the others at 7x7
    assert resnet50 - head_1000 + head_2 - c5_convs + c5_qkv + c5_tables == botnet50_param_count()


def test_scaled_model_count_matches_closed_form():
    model = build_botnet50(BotNet50Config(width_multiplier=Fraction(1, 8), input_size=64))
    assert model.num_parameters() == botnet50_param_count(width=Fraction(1, 8), input_size=64)


def test_width_eighth_at_64px_runs():
    model = build_botnet50(BotNet50Config(width_multiplier=Fraction(1, 8), input_size=64)).eval()
    with no_grad():
        out = model(np.random.default_rng(1).normal(size=(1, 3, 64, 64)))
    assert out.shape == (1, 2) and np.all(np.isfinite(out.data))


def test_input_shape_rejected():
    with pytest.raises(ValueError, match="expected input"):
        build_botnet50(SMALL)(np.zeros((1, 3, 64, 64)))


def test_conv_block_downsamples_c3_shape():
    spec = BottleneckSpec(256, 128, 512, stride=2, has_projection_shortcut=True)
    block = Bottleneck(spec, np.random.default_rng(0)).eval()
    with no_grad():
        out = bottleneck_forward(t(np.zeros((1, 256, 56, 56))), block)
    assert out.shape == (1, 512, 28, 28)


def test_bot_block_shapes():
    rng = np.random.default_rng(0)
    first = Bottleneck(BottleneckSpec(1024, 512, 2048, "mhsa", 2, True), rng, fmap_size=14).eval()
    later = Bottleneck(BottleneckSpec(2048, 512, 2048, "mhsa"), rng, fmap_size=7).eval()
    with no_grad():
        y = bot_block_forward(t(rng.normal(size=(1, 1024, 14, 14))), first)
        z = bot_block_forward(y, later)
    assert y.shape == z.shape == (1, 2048, 7, 7)


def test_conv_residual_collapse():
    block = Bottleneck(BottleneckSpec(16, 4, 16), np.random.default_rng(0)).eval()
    block.conv3.weight.data[...] = 0.0
    x = np.random.default_rng(1).normal(size=(2, 16, 5, 5))
    np.testing.assert_array_equal(block(t(x)).data, np.maximum(x, 0.0))


def test_bot_residual_collapse():
    spec = BottleneckSpec(16, 8, 32, "mhsa", 2, True)
    block = Bottleneck(spec, np.random.default_rng(0), heads=2, fmap_size=4).eval()
    for p in block.mhsa.wv:
        p.data[...] = 0.0
    x = t(np.random.default_rng(1).normal(size=(2, 16, 4, 4)))
    want = F.relu(block.proj_bn(block.proj(x))).data
    np.testing.assert_allclose(block(x).data, want, atol=1e-15)


def test_shortcut_mismatch_reported():
    block = Bottleneck(BottleneckSpec(16, 4, 16), np.random.default_rng(0))
    with pytest.raises(ValueError, match="expects 16 input channels"):
        block(t(np.zeros((1, 8, 4, 4))))
    block.spec = BottleneckSpec(16, 4, 16, stride=2)  # shortcut now disagrees with a strided F-path
    block.conv2.stride = 2
    with pytest.raises(ValueError, match=r"\(2, 16, 2, 2\).*\(2, 16, 4, 4\)"):
        block(t(np.ones((2, 16, 4, 4))))


@pytest.mark.parametrize("spatial_op", ["conv3x3", "mhsa"])
def test_block_gradients(spatial_op):
    spec = BottleneckSpec(8, 4, 16, spatial_op, 1, True)
    block = Bottleneck(spec, np.random.default_rng(3), heads=2, fmap_size=3)
    for m in block.modules():
        if hasattr(m, "freeze_stats"):
            m.freeze_stats = True
    x = t(np.random.default_rng(4).normal(size=(4, 8, 3, 3)), True)
    c = np.random.default_rng(5).normal(size=(4, 16, 3, 3))
    f = lambda _p: (block(x) * c).sum()
    for p in [x, block.conv1.weight, block.conv3.weight, block.proj.weight, block.bn2.gamma]:
        assert grad_check(f, p, max_checks=30) < 1e-4


def test_eval_forward_deterministic_and_seeded():
    x = np.random.default_rng(0).normal(size=(2, 3, 32, 32))
    a = build_botnet50(SMALL, seed=5).eval()
    b = build_botnet50(SMALL, seed=5).eval()
    with no_grad():
        np.testing.assert_array_equal(forward(a, x).data, forward(a, x).data)
        np.testing.assert_array_equal(forward(a, x).data, forward(b, x).data)
        assert not np.array_equal(forward(a, x).data, forward(build_botnet50(SMALL, seed=6).eval(), x).data)


def test_checkpoint_round_trip(tmp_path):
    model = build_botnet50(SMALL, seed=1)
    model.train()(np.random.default_rng(0).normal(size=(4, 3, 32, 32)))  # move BN running stats
    model.eval()
    x = np.random.default_rng(2).normal(size=(2, 3, 32, 32))
    with no_grad():
        before = model(x).data
    path = tmp_path / "m.botn"
    save_checkpoint(model, path, {"epoch": 7, "fold": 2, "val_accuracy": 0.75, "seed": 1})
    restored, meta = load_model(path)
    assert meta["epoch"] == "7" and meta["val_accuracy"] == "0.75"
    for (n1, a1), (n2, a2) in zip(model.state_dict().items(), restored.state_dict().items()):
        assert n1 == n2 and np.array_equal(a1, a2)
    with no_grad():
        np.testing.assert_array_equal(restored.eval()(x).data, before)


def test_checkpoint_parameter_names(tmp_path):
    names = list(build_botnet50(SMALL).state_dict())
    assert len(names) == len(set(names))
    assert "c5.0.mhsa.wq[3]" in names and "c5.2.mhsa.rh" in names


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.botn"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(build_botnet50(SMALL), path)


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "m.botn"
    save_checkpoint(build_botnet50(SMALL), path)
    path.write_bytes(path.read_bytes()[:500])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(build_botnet50(SMALL), path)


def test_checkpoint_rejects_shape_mismatch_naming_entry(tmp_path):
    path = tmp_path / "m.botn"
    save_checkpoint(build_botnet50(BotNet50Config(width_multiplier=Fraction(1, 4), input_size=32)), path)
    with pytest.raises(CheckpointError, match=r"c1\.conv\.weight"):
        load_checkpoint(build_botnet50(SMALL), path)


def test_grayscale_replicated_to_three_channels():
    slices = np.random.default_rng(3).random((2, 32, 32))
    x = replicate_channels(slices)
    assert x.shape == (2, 3, 32, 32) and np.array_equal(x[:, 0], x[:, 2])
    with no_grad():
        out = build_botnet50(SMALL).eval()(x)
    assert np.all(np.isfinite(out.data))


def test_mhsa_tables_sized_per_block_resolution():
    model = build_botnet50(SMALL)
    sizes = [(layer.height, layer.rh.shape[0]) for layer in model.mhsa_layers()]
    assert sizes == [(2, 3), (1, 1), (1, 1)]
    assert all(isinstance(m, MhsaLayer) for m in model.mhsa_layers())
