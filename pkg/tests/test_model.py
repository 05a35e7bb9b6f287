"""Temporal masking, rotary positions, causality, and rollout plumbing.

The mask contract: token i may attend to token j iff floor(j/C) <= floor(i/C)
— full attention inside a frame, causal across frames.  Causality is checked
bitwise: appending future frames must not change one bit of earlier outputs.
"""

import numpy as np
import pytest

from modeformer.codec import ModeSelection, encode_tokens, init_codec_params
from modeformer.datagen import PdeSpec, Trajectory
from modeformer.model import (DivergenceError, ModelBundle, ModelConfig,
                              NEG_MASK_VALUE, forward, init_model_params,
                              rollout, temporal_mask)
from modeformer.tensor import Graph, ShapeError, Tensor, finite_diff_gradient
from modeformer.trainer import TrainConfig, make_bundle, pretrain

RNG = np.random.default_rng(31337)


def tiny_bundle(layers=1, hidden=16, heads=2, k=4, width=8, seed=0):
    cfg = ModelConfig(layers=layers, hidden=hidden, heads=heads,
                      intermediate=2 * hidden)
    return make_bundle(cfg, {1: dict(k=k, policy="fixed-low", width=width)},
                       seed=seed)


# --------------------------------------------------------------------------
# temporal mask

def test_mask_t2_c2():
    m = temporal_mask(2, 2)
    allowed = m == 0.0
    want = np.array([[1, 1, 0, 0],
                     [1, 1, 0, 0],
                     [1, 1, 1, 1],
                     [1, 1, 1, 1]], dtype=bool)
    assert np.array_equal(allowed, want)
    assert (m[~want] == NEG_MASK_VALUE).all()


def test_mask_c1_is_lower_triangular():
    m = temporal_mask(5, 1)
    assert np.array_equal(m == 0.0, np.tril(np.ones((5, 5), bool)))


def test_mask_t1_full_attention():
    assert (temporal_mask(1, 4) == 0.0).all()


def test_mask_pad_column_blocked():
    pad = np.array([False, True, False, False])
    m = temporal_mask(2, 2, pad)
    assert (m[:, 1] == NEG_MASK_VALUE).all()       # nobody sees the pad token
    assert m[2, 0] == 0.0                           # real tokens unaffected


def test_mask_rejects_empty():
    with pytest.raises(ShapeError):
        temporal_mask(0, 2)


# --------------------------------------------------------------------------
# forward: causality and structure

@pytest.mark.parametrize("layers", [1, 2, 3])
@pytest.mark.parametrize("heads", [2, 4])
def test_future_perturbation_prefix_bitwise(layers, heads):
    """Perturbing every token of frames > t leaves frames <= t bit-identical.

    At fixed sequence length nothing in the stack mixes rows except masked
    attention, and masked weights are exactly 0.0, so the prefix must be
    bitwise stable — not merely close.
    """
    bundle = tiny_bundle(layers=layers, heads=heads)
    codec = bundle.codecs[1]
    field = RNG.normal(size=(4, 2, 16))
    bumped = field.copy()
    bumped[2:] += RNG.normal(size=(2, 2, 16))        # frames 2,3 perturbed
    with Graph():
        a = forward(encode_tokens(field, codec), bundle.model).embeddings.data
        b = forward(encode_tokens(bumped, codec), bundle.model).embeddings.data
    assert np.array_equal(a[:4], b[:4])
    assert not np.allclose(a[4:], b[4:])


def test_shorter_window_matches_prefix():
    """Dropping trailing frames reproduces the prefix outputs to 1e-12.

    Not asserted bitwise: reductions over the sequence axis (softmax sum,
    attention-value product) regroup SIMD lanes when the length changes, so
    window extension perturbs the last ulp even though masked weights are 0.
    """
    bundle = tiny_bundle(layers=2)
    codec = bundle.codecs[1]
    field = RNG.normal(size=(4, 2, 16))
    with Graph():
        full = forward(encode_tokens(field, codec), bundle.model).embeddings.data
        pre = forward(encode_tokens(field[:3], codec), bundle.model).embeddings.data
    assert np.allclose(full[:6], pre, atol=1e-12)


def test_within_frame_influence():
    """Perturbing quantity v of frame t changes the output for (t, u)."""
    bundle = tiny_bundle(layers=1)
    codec = bundle.codecs[1]
    field = RNG.normal(size=(2, 2, 16))
    bumped = field.copy()
    bumped[1, 1] += 1.0                              # (t=1, v)
    with Graph():
        a = forward(encode_tokens(field, codec), bundle.model).embeddings.data
        b = forward(encode_tokens(bumped, codec), bundle.model).embeddings.data
    assert not np.allclose(a[2], b[2])               # (t=1, u) moved
    assert np.array_equal(a[:2], b[:2])              # frame 0 untouched


def test_zero_layer_stack_is_identity():
    bundle = tiny_bundle(layers=0)
    toks = encode_tokens(RNG.normal(size=(3, 1, 16)), bundle.codecs[1])
    with Graph():
        out = forward(toks, bundle.model)
    assert np.array_equal(out.embeddings.data, toks.embeddings.data)


def test_channel_permutation_equivariance():
    """Swapping the two quantities swaps output rows within every frame."""
    bundle = tiny_bundle(layers=2)
    codec = bundle.codecs[1]
    field = RNG.normal(size=(3, 2, 16))
    swapped = field[:, ::-1].copy()
    with Graph():
        a = forward(encode_tokens(field, codec), bundle.model).embeddings.data
        b = forward(encode_tokens(swapped, codec), bundle.model).embeddings.data
    perm = np.arange(6).reshape(3, 2)[:, ::-1].reshape(-1)
    assert np.allclose(a[perm], b, atol=1e-12)


def test_batched_forward_matches_single():
    bundle = tiny_bundle(layers=2)
    codec = bundle.codecs[1]
    fields = RNG.normal(size=(3, 2, 1, 16))          # batch of 3
    with Graph():
        batched = forward(encode_tokens(fields, codec), bundle.model).embeddings.data
        singles = [forward(encode_tokens(fields[i], codec),
                           bundle.model).embeddings.data for i in range(3)]
    for i in range(3):
        assert np.allclose(batched[i], singles[i], atol=1e-12)


def test_forward_gradient_two_layers():
    """2-layer H=16 stack passes the finite-difference check (rel < 1e-4)."""
    bundle = tiny_bundle(layers=2, hidden=16)
    codec = bundle.codecs[1]
    probe_w = Tensor(RNG.normal(size=(4, 16)))

    def loss_from(x):
        with Graph():
            toks = encode_tokens(x, codec)
            out = forward(toks, bundle.model)
            return (out.embeddings * probe_w).sum()

    x = Tensor(RNG.normal(size=(2, 2, 16)), requires_grad=True)
    with Graph() as g:
        toks = encode_tokens(x, codec)
        out = forward(toks, bundle.model)
        got = g.backward((out.embeddings * probe_w).sum())[x]
    want = finite_diff_gradient(loss_from, x)
    assert np.abs(got - want).max() / np.abs(want).max() < 1e-4


def test_hidden_width_validated():
    with pytest.raises(ShapeError):
        ModelConfig(layers=1, hidden=15, heads=2, intermediate=32)
    with pytest.raises(ShapeError):
        ModelConfig(layers=1, hidden=12, heads=4, intermediate=32)  # head_dim 3, odd


# --------------------------------------------------------------------------
# rollout

def test_rollout_zero_steps_returns_window():
    bundle = tiny_bundle()
    win = RNG.normal(size=(3, 1, 16))
    out = rollout(win, 0, bundle)
    assert np.array_equal(out, win)


def test_rollout_extends_by_steps():
    bundle = tiny_bundle()
    out = rollout(RNG.normal(size=(2, 1, 16)), 5, bundle, guard=1e12)
    assert out.shape == (7, 1, 16)


def test_rollout_max_context_truncates_left():
    """With max_context=w the prediction only sees the last w frames."""
    bundle = tiny_bundle(layers=1)
    win = RNG.normal(size=(5, 1, 16))
    a = rollout(win, 1, bundle, max_context=2, guard=1e12)
    b = rollout(win[3:], 1, bundle, max_context=2, guard=1e12)
    assert np.allclose(a[-1], b[-1], atol=1e-12)


def test_rollout_divergence_guard():
    bundle = tiny_bundle()
    for name, t in bundle.parameters().items():
        if "unproj" in name or "unlift" in name:
            t.data *= 1e9
    with pytest.raises(DivergenceError):
        rollout(RNG.normal(size=(2, 1, 16)), 3, bundle, guard=1e6)


def test_rollout_missing_codec_dim():
    bundle = tiny_bundle()
    with pytest.raises(ShapeError):
        rollout(RNG.normal(size=(2, 1, 8, 8)), 1, bundle)


def test_rollout_of_trained_identity_stays_constant():
    """Fit the codec to the identity next-step map on constant fields (the
    zero-layer stack is already the identity), then roll out: a constant
    window must stay constant within 1e-6."""
    trajs = []
    for i, c in enumerate(np.linspace(-1.0, 1.0, 8)):
        spec = PdeSpec("advection1d", {"beta": 0.0}, (16,), (1.0,),
                       n_steps=6, dt=0.1, seed=i, ic_modes=3)
        trajs.append(Trajectory(spec, np.full((6, 1, 16), c), "x"))
    bundle = tiny_bundle(layers=0)
    import tempfile
    pretrain(bundle, trajs,
             TrainConfig(total_steps=4000, lr_init=3e-3, lr_min=1e-7, seed=0,
                         holdout_fraction=0.0, log_every=4000),
             tempfile.mkdtemp())
    out = rollout(np.full((2, 1, 16), 0.37), 4, bundle)
    assert np.abs(out - 0.37).max() < 1e-6
