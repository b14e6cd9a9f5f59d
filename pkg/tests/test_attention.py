import numpy as np
import pytest

from botkit.attention import (
    MhsaConfig,
    MhsaLayer,
    attention_output,
    attention_weights,
    content_logits,
    mhsa2d_forward,
    relative_logits,
)
from botkit.gradcheck import grad_check
from botkit.oracles import layer_brute_force
from botkit.tensor import Tensor


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def layer(d=8, heads=2, h=3, w=3, seed=0, value_relative=False):
    return MhsaLayer(MhsaConfig(d, heads, value_relative), h, w, rng=np.random.default_rng(seed))


def zero_tables(lyr):
    for p in (lyr.rh, lyr.rw):
        p.data[...] = 0.0


def test_config_validation():
    assert MhsaConfig(512, 8).d_head == 64
    with pytest.raises(ValueError, match="divisible"):
        MhsaConfig(10, 3)
    with pytest.raises(ValueError):
        MhsaConfig(8, 0)


def test_table_sizes_and_head_sharing():
    lyr = layer(h=3, w=5)
    assert lyr.rh.shape == (5, 4) and lyr.rw.shape == (9, 4)
    assert len(lyr.wq) == len(lyr.wk) == len(lyr.wv) == 2
    names = [n for n, _ in lyr.named_parameters()]
    assert sum(n.startswith("rh") for n in names) == 1


# content logits
def test_content_logits_single_position():
    x = t([[1.0, 2.0]])
    wq, wk = t([[1.0], [0.5]]), t([[2.0], [-0.5]])
    e = content_logits(x, wq, wk).data
    assert e.shape == (1, 1) and e[0, 0] == pytest.approx(2.0 * 1.0 / 1.0)


def test_content_logits_identical_rows():
    rng = np.random.default_rng(1)
    x = t(np.tile(rng.normal(size=4), (3, 1)))
    e = content_logits(x, t(rng.normal(size=(4, 2))), t(rng.normal(size=(4, 2)))).data
    np.testing.assert_allclose(e, e[:, :1].repeat(3, axis=1), atol=1e-12)


def test_content_logits_hand_example():
    e = content_logits(t(np.eye(2)), t(np.eye(2)), t(np.eye(2))).data
    np.testing.assert_allclose(e, np.eye(2) / np.sqrt(2), atol=1e-15)


def test_content_logits_dimension_mismatch():
    with pytest.raises(ValueError):
        content_logits(t(np.zeros((2, 3))), t(np.zeros((2, 2))), t(np.zeros((2, 2))))


# relative logits
def test_relative_logits_zero_tables():
    q = t(np.random.default_rng(2).normal(size=(4, 3)))
    b = relative_logits(q, t(np.zeros((3, 3))), t(np.zeros((3, 3))), 2, 2).data
    assert np.all(b == 0.0)


def test_relative_logits_single_position():
    q, rh, rw = t([[1.0, 2.0]]), t([[0.5, 1.0]]), t([[-1.0, 3.0]])
    assert relative_logits(q, rh, rw, 1, 1).data[0, 0] == pytest.approx(1 * -0.5 + 2 * 4.0)


def test_relative_logits_offset_indexing():
    a, b, c, d, e = 1.0, 10.0, 100.0, 1000.0, 10000.0
    rw = t([[a], [b], [c], [d], [e]])  # offsets -2..2
    out = relative_logits(t(np.ones((3, 1))), t(np.zeros((1, 1))), rw, 1, 3).data
    np.testing.assert_array_equal(out[0], [c, d, e])
    np.testing.assert_array_equal(out[2], [a, b, c])


def test_relative_logits_table_mismatch():
    with pytest.raises(ValueError, match="expected 3x3"):
        relative_logits(t(np.ones((4, 2))), t(np.zeros((2, 2))), t(np.zeros((3, 2))), 2, 2)


# weights and output
def test_attention_weight_examples():
    np.testing.assert_array_equal(attention_weights(t(np.zeros((4, 4)))).data, 0.25)
    np.testing.assert_allclose(attention_weights(t([[30.0, -30.0]])).data, [[1.0, 0.0]], atol=1e-25)
    w = attention_weights(t(np.random.default_rng(3).normal(size=(5, 5)) * 4)).data
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(w > 0)


def test_attention_output_examples():
    rng = np.random.default_rng(4)
    x, wv = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(attention_output(t(np.eye(3)), t(x), t(wv)).data, x @ wv, atol=1e-15)
    z = attention_output(t(np.full((3, 3), 1 / 3)), t(x), t(wv)).data
    np.testing.assert_allclose(z, np.tile((x @ wv).mean(axis=0), (3, 1)), atol=1e-14)

    alpha = np.array([[0.3, 0.7], [0.9, 0.1]])
    x2, wv2 = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    v = x2 @ wv2
    hand = np.array([alpha[i, 0] * v[0] + alpha[i, 1] * v[1] for i in range(2)])
    np.testing.assert_allclose(attention_output(t(alpha), t(x2), t(wv2)).data, hand, atol=1e-12)


def test_attention_output_shape_mismatch():
    with pytest.raises(ValueError):
        attention_output(t(np.eye(3)), t(np.zeros((2, 4))), t(np.zeros((4, 2))))


# full layer
def test_single_position_is_value_projection():
    lyr = layer(d=8, heads=2, h=1, w=1)
    x = np.random.default_rng(5).normal(size=(1, 8, 1, 1))
    out = mhsa2d_forward(t(x), lyr).data[0, :, 0, 0]
    want = np.concatenate([x[0, :, 0, 0] @ p.data for p in lyr.wv])
    np.testing.assert_allclose(out, want, atol=1e-14)


@pytest.mark.parametrize("h,w", [(1, 1), (2, 3), (4, 4), (1, 5)])
def test_shape_preserved(h, w):
    lyr = layer(d=8, heads=4, h=h, w=w)
    assert mhsa2d_forward(t(np.zeros((2, 8, h, w))), lyr).shape == (2, 8, h, w)


@pytest.mark.parametrize("value_relative", [False, True])
def test_matches_brute_force(value_relative):
    lyr = layer(value_relative=value_relative, seed=6)
    x = np.random.default_rng(7).normal(size=(1, 8, 3, 3))
    got = mhsa2d_forward(t(x), lyr).data
    np.testing.assert_allclose(got, layer_brute_force(x, lyr), atol=1e-10, rtol=0)


def test_zero_tables_reduce_to_content_only():
    lyr = layer(seed=8)
    zero_tables(lyr)
    x = np.random.default_rng(9).normal(size=(2, 8, 3, 3))
    got = mhsa2d_forward(t(x), lyr).data
    np.testing.assert_allclose(got, layer_brute_force(x, lyr, use_positions=False), atol=1e-12, rtol=0)


def test_trace_shapes_and_rows():
    lyr = layer(h=2, w=3)
    _, tr = mhsa2d_forward(t(np.random.default_rng(0).normal(size=(1, 8, 2, 3))), lyr, trace=True)
    for a in (tr.content, tr.positional, tr.weights):
        assert a.shape == (1, 2, 6, 6)
    np.testing.assert_allclose(tr.weights.sum(axis=-1), 1.0, atol=1e-12)


def _permute(x, perm):
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w)[:, :, perm].reshape(n, c, h, w)


def test_positions_break_permutation_equivariance():
    perm = np.array([3, 1, 0, 2])  # a non-trivial shuffle of a 2x2 map
    inv = np.argsort(perm)
    x = np.random.default_rng(10).normal(size=(1, 8, 2, 2))

    lyr = layer(h=2, w=2, seed=11)
    base = mhsa2d_forward(t(x), lyr).data
    moved = _permute(mhsa2d_forward(t(_permute(x, perm)), lyr).data, inv)
    assert np.max(np.abs(moved - base)) > 1e-3

    zero_tables(lyr)
    base = mhsa2d_forward(t(x), lyr).data
    moved = _permute(mhsa2d_forward(t(_permute(x, perm)), lyr).data, inv)
    np.testing.assert_allclose(moved, base, atol=1e-12)


def test_channel_and_size_mismatch_rejected():
    lyr = layer(h=3, w=3)
    with pytest.raises(ValueError, match="channels"):
        mhsa2d_forward(t(np.zeros((1, 4, 3, 3))), lyr)
    with pytest.raises(ValueError, match="3x3"):
        mhsa2d_forward(t(np.zeros((1, 8, 2, 2))), lyr)


@pytest.mark.parametrize("value_relative", [False, True])
def test_layer_gradients(value_relative):
    lyr = layer(d=4, heads=2, h=2, w=3, seed=12, value_relative=value_relative)
    x = t(np.random.default_rng(13).normal(size=(2, 4, 2, 3)), True)
    c = np.random.default_rng(14).normal(size=(2, 4, 2, 3))
    f = lambda _p: (mhsa2d_forward(x, lyr) * c).sum()
    for p in [x, *lyr.parameters()]:
        assert grad_check(f, p) < 1e-4
