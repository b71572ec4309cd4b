import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from blockssm import diffcore as dc
from blockssm.blocks import ACTIVATIONS, Block, BlockConfig, blu, gelu
from blockssm.diffcore import Param, Tape
from blockssm.linmaps import MAP_KINDS, SpectralBounds
from blockssm.objective import AdamW
from gradcheck import TOL, relative_error, scalarize


def _np_act(kind, z, beta=0.0):
    if kind == "gelu":
        return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "blu":
        b = min(max(beta, -1.0), 1.0)
        return b * (np.sqrt(z * z + 1.0) - 1.0) + z
    return z


def _np_forward(block, x, prev=None):
    """Plain numpy reference for one step of a block."""
    h, outs = x, []
    for k, layer in enumerate(block.layers):
        W = layer.map.effective_value()
        z = h @ W.T + layer.bias.value
        if layer.residual:
            z = z + h
        if prev is not None:
            z = z + prev[k] @ layer.recurrent.effective_value().T
        beta = layer.beta.value[0, 0] if layer.beta is not None else 0.0
        h = _np_act(layer.activation, z, beta)
        outs.append(h)
    return h, outs


def _randomize(block, rng):
    for p in block.parameters():
        p.value = rng.uniform(-1, 1, p.shape)


def test_gelu_reference_values():
    assert gelu(0.0) == 0.0
    assert gelu(1.0) == pytest.approx(0.8413447460685429, abs=1e-12)
    assert gelu(-1.0) == pytest.approx(-0.15865525393145707, abs=1e-12)


def test_blu_zero_beta_is_identity_bitwise():
    x = np.linspace(-5, 5, 101)
    assert np.array_equal(blu(x, 0.0), x)


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-50, 50), beta=st.floats(-1, 1))
def test_blu_bounded_deviation_from_identity(x, beta):
    # |sqrt(x^2+1) - 1| <= |x|, so the deviation is at most |beta| |x|
    assert abs(blu(x, beta) - x) <= abs(beta) * abs(x) + 1e-12


def test_blu_is_smooth():
    # second derivative beta / (x^2+1)^1.5 is continuous: finite differences agree across 0
    h = 1e-4
    d2 = lambda x: (blu(x + h, 0.7) - 2 * blu(x, 0.7) + blu(x - h, 0.7)) / h**2
    assert d2(0.0) == pytest.approx(0.7, rel=1e-5)
    assert d2(1e-3) == pytest.approx(d2(-1e-3), rel=1e-6)


def test_blu_beta_clamped():
    assert blu(2.0, 5.0) == blu(2.0, 1.0)
    cfg = BlockConfig(kind="mlp", layers=2, nodes=3, activation="blu")
    b = Block(2, 1, cfg)
    b.layers[0].beta.value[...] = 3.0
    b.project()
    assert b.layers[0].beta.value[0, 0] == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        BlockConfig(kind="cnn")
    with pytest.raises(ValueError):
        BlockConfig(activation="swish")
    with pytest.raises(ValueError):
        BlockConfig(layers=0)
    assert BlockConfig(bounds=(0.1, 0.9)).bounds == SpectralBounds(0.1, 0.9)


def test_single_identity_layer_is_linear_map(rng):
    b = Block(3, 2, BlockConfig(kind="mlp", layers=1, activation="identity"), rng=rng)
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(b(x).value, x @ b.layers[0].map.effective_value().T)


def test_mlp_zero_weights_gives_bias(rng):
    b = Block(3, 2, BlockConfig(kind="mlp", layers=2, nodes=4), rng=rng)
    for p in b.parameters():
        p.value = np.zeros(p.shape)
    b.layers[-1].bias.value[...] = [[1.0, -2.0]]
    np.testing.assert_array_equal(b(np.ones((3, 3))).value, [[1.0, -2.0]] * 3)


def test_two_layer_mlp_hand_oracle():
    b = Block(1, 1, BlockConfig(kind="mlp", layers=2, nodes=1, activation="relu"))
    b.layers[0].map.W.value[...] = 2.0
    b.layers[0].bias.value[...] = -1.0
    b.layers[1].map.W.value[...] = 3.0
    b.layers[1].bias.value[...] = 0.5
    # relu(2*2 - 1) * 3 + 0.5 and relu(2*0 - 1) * 3 + 0.5
    np.testing.assert_array_equal(b(np.array([[2.0], [0.0]])).value, [[9.5], [0.5]])


def test_rmlp_shortcut_only_where_widths_match():
    b = Block(2, 3, BlockConfig(kind="rmlp", layers=3, nodes=4))
    assert [l.residual for l in b.layers] == [False, True, False]
    b2 = Block(4, 4, BlockConfig(kind="rmlp", layers=2, nodes=4))
    assert [l.residual for l in b2.layers] == [False, True]


def test_rmlp_zero_params_passes_hidden_through():
    # with all weights and biases zero, residual identity layers carry h unchanged
    b = Block(2, 2, BlockConfig(kind="rmlp", layers=3, nodes=2, activation="identity"))
    for p in b.parameters():
        p.value = np.zeros(p.shape)
    b.layers[0].map.W.value[...] = np.eye(2)
    x = np.array([[1.0, -3.0]])
    np.testing.assert_array_equal(b(x).value, x)


@pytest.mark.parametrize("kind", ["mlp", "rmlp"])
@pytest.mark.parametrize("act", ACTIVATIONS)
def test_feedforward_matches_numpy_reference(kind, act):
    rng = np.random.default_rng(3)
    b = Block(3, 2, BlockConfig(kind=kind, layers=3, nodes=3, activation=act), rng=rng)
    _randomize(b, rng)
    x = rng.normal(size=(6, 3))
    np.testing.assert_allclose(b(x).value, _np_forward(b, x)[0], rtol=1e-12, atol=1e-13)


def test_rnn_zero_recurrence_equals_mlp(rng):
    cfg = BlockConfig(kind="rnn", layers=2, nodes=4)
    b = Block(3, 2, cfg, rng=rng)
    for layer in b.layers:
        layer.recurrent.W.value = np.zeros(layer.recurrent.W.shape)
    xs = [rng.normal(size=(2, 3)) for _ in range(4)]
    outs = b.forward_sequence(xs)
    for x, y in zip(xs, outs):
        np.testing.assert_allclose(y.value, _np_forward(b, x)[0], rtol=1e-13)


def test_rnn_length_one_equals_forward(rng):
    b = Block(3, 2, BlockConfig(kind="rnn", layers=3, nodes=4), rng=rng)
    x = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(b.forward_sequence([x])[0].value, b(x).value)


def test_rnn_manual_unroll(rng):
    b = Block(2, 2, BlockConfig(kind="rnn", layers=2, nodes=3, activation="gelu"), rng=rng)
    _randomize(b, rng)
    xs = [rng.normal(size=(4, 2)) for _ in range(3)]
    prev = [np.zeros((4, 3)), np.zeros((4, 2))]
    expected = []
    for x in xs:
        y, prev = _np_forward(b, x, prev)
        expected.append(y)
    for got, want in zip(b.forward_sequence(xs), expected):
        np.testing.assert_allclose(got.value, want, rtol=1e-12, atol=1e-13)


def test_rnn_linear_maps_labelled():
    b = Block(2, 2, BlockConfig(kind="rnn", layers=2, nodes=3), name="obs")
    assert [n for n, _ in b.linear_maps()] == ["obs.0", "obs.0.Wr", "obs.1", "obs.1.Wr"]


def test_width_mismatch_rejected():
    b = Block(3, 2, BlockConfig())
    with pytest.raises(dc.ShapeError):
        b(np.ones((1, 2)))
    with pytest.raises(ValueError):
        b.forward_sequence([])


@pytest.mark.parametrize("kind", ["mlp", "rmlp", "rnn"])
@pytest.mark.parametrize("linmap", sorted(MAP_KINDS))
@pytest.mark.parametrize("act", ["gelu", "blu", "identity"])
def test_block_gradients(kind, linmap, act):
    rng = np.random.default_rng(11)
    cfg = BlockConfig(kind=kind, layers=3, nodes=3, activation=act, linmap=linmap,
                      bounds=SpectralBounds(0.2, 0.8))
    b = Block(3, 3, cfg, rng=rng)
    for layer in b.layers:
        layer.bias.value = rng.uniform(-0.5, 0.5, layer.bias.shape)
        if layer.beta is not None:
            layer.beta.value[...] = 0.3
    xs = [rng.normal(size=(2, 3)) for _ in range(3 if kind == "rnn" else 1)]
    R = rng.normal(size=(2, 3))

    def f():
        out = b.forward_sequence(xs)
        total = scalarize(out[0], R)
        for y in out[1:]:
            total = dc.add(total, scalarize(y, R))
        return total

    assert relative_error(f, b.parameters()) < TOL


def test_softsvd_block_exposes_penalties(rng):
    b = Block(3, 3, BlockConfig(kind="rmlp", layers=2, nodes=3, linmap="softsvd"), rng=rng)
    assert len(b.reg_penalties()) == 2
    assert Block(3, 3, BlockConfig(linmap="pf", nodes=3)).reg_penalties() == []


def test_block_fits_simple_function():
    rng = np.random.default_rng(0)
    b = Block(1, 1, BlockConfig(kind="rmlp", layers=3, nodes=16), rng=rng)
    x = np.linspace(-2, 2, 64).reshape(-1, 1)
    y = np.sin(x)
    opt = AdamW(b.parameters(), lr=1e-2, weight_decay=0.0)
    for _ in range(500):
        with Tape() as tape:
            err = dc.sub(b(x), y)
            loss = dc.mean_all(dc.square(err))
        tape.backward(loss)
        opt.step()
        opt.zero_grad()
    assert loss.item() < 1e-3
