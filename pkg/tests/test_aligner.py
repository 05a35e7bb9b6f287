"""Spectral evolution features, caption grammar, contrastive losses, probes.

Feature worked examples are exact trigonometric identities (a shifted field
rotates every mode's phase by -2*pi*k*s/L), so they pin both the feature
definition and its degenerate-mode handling.
"""

import numpy as np
import pytest

from modeformer.aligner import (AlignerConfig, AlignTrainConfig, GrammarError,
                                ParsedCaption, SUBSTITUTION_TABLE, align_loss,
                                align_train, augment_caption, caption_encode,
                                caption_token_ids, classify_probe, finetune,
                                finetune_loss, init_aligner_params,
                                load_aligner_params, parse_caption,
                                physics_features, render_caption,
                                retrieval_accuracy, save_aligner_params,
                                scale_caption, substitute_caption,
                                swap_time_notation, tokenize_caption)
from modeformer.codec import ModeSelection
from modeformer.datagen import PdeSpec, analytic_solution, band_limited_ic, \
    caption_for, gen_trajectory
from modeformer.tensor import Graph, ShapeError, Tensor, finite_diff_gradient
from modeformer.trainer import TrainConfig, make_bundle
from modeformer.model import ModelConfig

RNG = np.random.default_rng(5150)


def tiny_aligner(k=2, ndim=1, channels=1, seed=0, **cfg_kw):
    cfg = AlignerConfig(**{**dict(d_s=8, d_t=4, vocab=64), **cfg_kw})
    return init_aligner_params(cfg, ModeSelection(k, "fixed-low"), ndim,
                               channels, np.random.default_rng(seed))


# --------------------------------------------------------------------------
# physics features

def test_features_identity_state():
    """u_ti = u_t0 -> every live mode reports (1, 0, 0) and R = 1."""
    u = band_limited_ic(np.random.default_rng(1), (32,), 5)[None]
    f = physics_features(u, u.copy(), ModeSelection(4, "fixed-low"), 1)
    assert np.allclose(f.triples.data, [1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(f.ratios.data, 1.0, atol=1e-12)


def test_features_pure_amplification():
    u = band_limited_ic(np.random.default_rng(2), (32,), 5)[None]
    f = physics_features(u, 2.0 * u, ModeSelection(4, "fixed-low"), 1)
    assert np.allclose(f.triples.data[..., 0], 1.0, atol=1e-12)
    assert np.allclose(f.triples.data[..., 1], 0.0, atol=1e-12)
    assert np.allclose(f.triples.data[..., 2], np.log(2.0), atol=1e-12)


def test_features_advection_rotates_phases():
    """A shift by beta*t multiplies mode k by exp(-2i*pi*k*beta*t/L)."""
    u0 = band_limited_ic(np.random.default_rng(3), (64,), 5)[None]
    beta, t, length = 0.8, 0.3, 2.0
    ui = analytic_solution("advection1d", u0, {"beta": beta}, (length,), t)
    f = physics_features(u0, ui, ModeSelection(5, "fixed-low"), 1)
    phi = -2.0 * np.pi * f.freqs[:, 0] * beta * t / length
    # all bins 0..4 are populated by the IC, so none are degenerate
    assert np.allclose(f.triples.data[0, :, 0], np.cos(phi), atol=1e-10)
    assert np.allclose(f.triples.data[0, :, 1], np.sin(phi), atol=1e-10)
    assert np.allclose(f.triples.data[0, :, 2], 0.0, atol=1e-10)


def test_features_degenerate_modes_are_neutral():
    z = np.zeros((1, 16))
    f = physics_features(z, z, ModeSelection(3, "fixed-low"), 1)
    assert np.allclose(f.triples.data, [1.0, 0.0, 0.0])
    assert np.allclose(f.ratios.data, 1.0)


def test_features_scale_invariant_phase():
    u = band_limited_ic(np.random.default_rng(4), (32,), 4)[None]
    v = analytic_solution("diffusion1d", u, {"nu": 0.1}, (1.0,), 0.2)
    a = physics_features(u, v, ModeSelection(4, "fixed-low"), 1)
    b = physics_features(100.0 * u, 100.0 * v, ModeSelection(4, "fixed-low"), 1)
    assert np.allclose(a.triples.data, b.triples.data, atol=1e-12)


def test_features_log_ratio_clamped():
    u = band_limited_ic(np.random.default_rng(5), (32,), 4)[None]
    f = physics_features(u, 1e6 * u, ModeSelection(4, "fixed-low"), 1)
    assert np.allclose(f.triples.data[..., 2], 10.0, atol=1e-12)


def test_features_shape_mismatch():
    with pytest.raises(ShapeError):
        physics_features(np.zeros((1, 16)), np.zeros((1, 32)),
                         ModeSelection(3, "fixed-low"), 1)


def test_features_flat_width():
    u = RNG.normal(size=(3, 2, 16))               # batch of 3, C=2
    f = physics_features(u, u, ModeSelection(4, "fixed-low"), 1)
    assert f.triples.shape == (3, 2, 4, 3)
    assert f.flat().shape == (3, 24)


# --------------------------------------------------------------------------
# caption tower

def test_tokenizer_worked_example():
    got = tokenize_caption(r"\partial_t u + 0.25 \partial_x u = 0")
    assert got == [r"\partial", "_", "t", "u", "+", "0.25",
                   r"\partial", "_", "x", "u", "=", "0"]


def test_token_ids_deterministic_and_in_range():
    a = caption_token_ids(r"\partial_t u = 0.1 \partial_{xx} u", 4096)
    b = caption_token_ids(r"\partial_t u = 0.1 \partial_{xx} u", 4096)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() < 4096
    with pytest.raises(ValueError):
        caption_token_ids("   ")


def test_caption_encode_unit_norm_and_deterministic():
    params = tiny_aligner()
    e1 = caption_encode(r"\partial_t u + 1 \partial_x u = 0", params).data
    e2 = caption_encode(r"\partial_t u + 1 \partial_x u = 0", params).data
    assert np.array_equal(e1, e2)
    assert abs(np.linalg.norm(e1) - 1.0) < 1e-12
    e3 = caption_encode(r"\partial_t u = 1 \partial_{xx} u", params).data
    assert not np.allclose(e1, e3)


# --------------------------------------------------------------------------
# alignment loss

def field_batch(n, extents=(16,), seed=0):
    return np.stack([band_limited_ic(np.random.default_rng(seed + i),
                                     extents, 3)[None] for i in range(n)])


def test_align_loss_energy_term_vanishes_when_conservative():
    """u_ti = u_t0 keeps every R at 1, so lam cannot change the loss."""
    params = tiny_aligner()
    caps = [r"\partial_t u + 1 \partial_x u = 0",
            r"\partial_t u = 0.5 \partial_{xx} u"]
    u = field_batch(2)
    a = align_loss(caps, u, u.copy(), params,
                   AlignerConfig(lam=0.0, d_s=8, d_t=4, vocab=64))
    b = align_loss(caps, u, u.copy(), params,
                   AlignerConfig(lam=100.0, d_s=8, d_t=4, vocab=64))
    assert abs(float(a.data) - float(b.data)) < 1e-12
    assert float(a.data) >= 0.0


def test_align_loss_penalizes_energy_drift():
    params = tiny_aligner()
    caps = [r"\partial_t u + 1 \partial_x u = 0",
            r"\partial_t u = 0.5 \partial_{xx} u"]
    u = field_batch(2)
    lam0 = float(align_loss(caps, u, 2.0 * u, params,
                            AlignerConfig(lam=0.0, d_s=8, d_t=4, vocab=64)).data)
    lam1 = float(align_loss(caps, u, 2.0 * u, params,
                            AlignerConfig(lam=1.0, d_s=8, d_t=4, vocab=64)).data)
    assert lam1 == pytest.approx(lam0 + 1.0, abs=1e-12)   # |mean R - 1| = 1


def test_align_loss_validation():
    params = tiny_aligner()
    u = field_batch(2)
    with pytest.raises(ShapeError):
        align_loss(["one"], u[:1], u[:1], params)          # batch of 1
    with pytest.raises(ShapeError):
        align_loss(["a", "b", "c"], u, u, params)          # count mismatch
    with pytest.raises(ShapeError):
        align_loss(["a", "b"], u[:, 0], u[:, 0], params)   # missing C axis
    wide = np.concatenate([u, u], axis=1)                  # C=2 vs params C=1
    with pytest.raises(ShapeError):
        align_loss(["a", "b"], wide, wide, params)


def test_align_loss_gradcheck():
    params = tiny_aligner()
    caps = [r"\partial_t u + 1 \partial_x u = 0",
            r"\partial_t u = 0.5 \partial_{xx} u"]
    u0 = field_batch(2, seed=3)
    ui = u0 * 1.1 + 0.05 * field_batch(2, seed=9)

    def loss_value(_):
        with Graph():
            return align_loss(caps, u0, ui, params)

    with Graph() as g:
        grads = g.backward(align_loss(caps, u0, ui, params))
    for name, p in params.parameters().items():
        got = grads[p]
        want = finite_diff_gradient(loss_value, p, h=1e-6)
        denom = max(np.abs(want).max(), 1e-12)
        assert np.abs(got - want).max() / denom < 1e-4, name


def test_retrieval_accuracy_worked_examples():
    assert retrieval_accuracy(np.eye(3)) == 1.0
    anti = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert retrieval_accuracy(anti) == 0.0
    # field->text: row 0 hits, row 1 picks col 0.  text->field: both miss
    # (col 0 argmax is row 1, col 1 argmax is row 0).  Mean of 0.5 and 0.0.
    one_sided = np.array([[2.0, 1.0], [3.0, 0.5]])
    assert retrieval_accuracy(one_sided) == 0.25


# --------------------------------------------------------------------------
# fine-tuning loss

def test_finetune_loss_exact_prediction():
    """L_sim = 0 leaves the pure (negated) reward; the tuple is consistent."""
    params = tiny_aligner()
    truth = np.stack([field_batch(3, seed=4)] * 2, axis=1)   # [3, 2, 1, 16]
    caps = [r"\partial_t u + 1 \partial_x u = 0"] * 3
    loss, l_sim, s = finetune_loss(truth[:, 1:], truth, caps, params)
    assert l_sim < 1e-12
    assert -1.0 <= s <= 1.0
    assert float(loss.data) == pytest.approx(l_sim - s, abs=1e-12)


def test_finetune_loss_frame_count_validated():
    params = tiny_aligner()
    truth = RNG.normal(size=(2, 3, 1, 16))
    with pytest.raises(ShapeError):
        finetune_loss(truth, truth, ["a", "b"], params)


# --------------------------------------------------------------------------
# caption grammar

ALL_SPECS = [
    PdeSpec("advection1d", {"beta": 0.25}, (32,), (1.0,), 2, 0.1, 0),
    PdeSpec("diffusion1d", {"nu": 0.05}, (32,), (1.0,), 2, 0.1, 0),
    PdeSpec("burgers1d", {"nu": 0.01 * np.pi}, (32,), (1.0,), 2, 0.1, 0),
    PdeSpec("reacdiff1d", {"nu": 0.1, "rho": 2.0}, (32,), (1.0,), 2, 0.1, 0),
    PdeSpec("heat2d", {"nu": 0.02}, (16, 16), (1.0, 1.0), 2, 0.1, 0, ic_modes=3),
    PdeSpec("navierstokes2d", {"nu": 1e-3}, (16, 16), (1.0, 1.0), 2, 0.1, 0,
            ic_modes=3),
    PdeSpec("heat3d", {"nu": 0.02}, (8, 8, 8), (1.0,) * 3, 2, 0.1, 0,
            ic_modes=3),
]


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.family)
def test_grammar_round_trips_generated_captions(spec):
    cap = caption_for(spec)
    assert render_caption(parse_caption(cap)) == cap


def test_parse_fields():
    p = parse_caption(r"\partial_t u + 0.25 \partial_x u = 0")
    assert p == ParsedCaption("advection", "u", "x", False, ("0.25",), None)
    q = parse_caption(r"\partial_t u = 0.1 \partial_{xx} u + 2 u ( 1 - u )")
    assert q.template == "reacdiff" and q.coeffs == ("0.1", "2")


def test_substitution_worked_example():
    got = substitute_caption(r"\partial_t u + 0.25 \partial_x u = 0",
                             {"u": "v"})
    assert got == r"\partial_t v + 0.25 \partial_x v = 0"
    got = substitute_caption(r"\partial_t u + \beta \partial_x u = 0",
                             {r"\beta": "c", "x": r"\xi"})
    assert got == r"\partial_t u + c \partial_\xi u = 0"


def test_substitution_rejects_pairs_outside_table():
    with pytest.raises(ValueError):
        substitute_caption(r"\partial_t u + 1 \partial_x u = 0", {"u": "c"})
    assert "c" not in SUBSTITUTION_TABLE["u"]


def test_scale_caption_both_forms():
    adv = scale_caption(r"\partial_t u + 0.25 \partial_x u = 0", 1.25)
    assert adv == r"1.25 \left( \partial_t u + 0.25 \partial_x u \right) = 0"
    dif = scale_caption(r"\partial_t u = 0.05 \partial_{xx} u", 2.0)
    assert dif == (r"2.00 \left( \partial_t u \right) = "
                   r"2.00 \left( 0.05 \partial_{xx} u \right)")
    # both round-trip through the parser
    assert render_caption(parse_caption(adv)) == adv
    assert render_caption(parse_caption(dif)) == dif


def test_scale_caption_guards():
    cap = r"\partial_t u = 0.05 \partial_{xx} u"
    assert scale_caption(cap, 1.0) == cap
    with pytest.raises(ValueError):
        scale_caption(cap, -2.0)
    with pytest.raises(GrammarError):
        scale_caption(scale_caption(cap, 2.0), 3.0)


def test_swap_time_notation_involution():
    cap = r"\partial_t u = 0.05 \partial_{xx} u"
    swapped = swap_time_notation(cap)
    assert swapped == r"\frac{\partial}{\partial t} u = 0.05 \partial_{xx} u"
    assert swap_time_notation(swapped) == cap


def test_augment_deterministic_and_in_grammar():
    cap = r"\partial_t u + \partial_x ( u^2 / 2 ) = 0.01 \partial_{xx} u"
    a = augment_caption(cap, seed=7)
    b = augment_caption(cap, seed=7)
    assert a == b and len(a) == 4
    for variant in a:
        q = parse_caption(variant)
        assert q.template == "burgers"
        # numeric coefficients are physics: never rewritten
        assert [c for c in q.coeffs if c[0].isdigit()] == ["0.01"]


def test_parse_rejections():
    with pytest.raises(GrammarError):
        parse_caption(r"\partial_t u + u = 0")                 # no template
    with pytest.raises(GrammarError):
        parse_caption(r"\partial_t u + \partial_x ( u^2 / 2 ) = "
                      r"0.01 \partial_{\xi\xi} u")             # mixed x / xi
    with pytest.raises(GrammarError):
        parse_caption(r"1.10 \left( \partial_t u \right) = "
                      r"1.20 \left( 0.05 \partial_{xx} u \right)")


# --------------------------------------------------------------------------
# alignment training and checkpoints

def align_samples(n_per=10, extents=(16,)):
    samples = []
    for i in range(n_per):
        for family, coeffs in [("advection1d", {"beta": 0.3 + 0.1 * i}),
                               ("diffusion1d", {"nu": 0.02 + 0.01 * i}),
                               ("burgers1d", {"nu": (0.01 + 0.002 * i) * np.pi})]:
            spec = PdeSpec(family, coeffs, extents, (1.0,), n_steps=4, dt=0.1,
                           seed=100 * i + hash(family) % 50, ic_modes=3)
            t = gen_trajectory(spec)
            samples.append((t.caption, t.values[0], t.values[-1]))
    return samples


def test_align_train_learns_retrieval(tmp_path):
    params = tiny_aligner(k=3, d_s=16, d_t=8, vocab=256, seed=1)
    res = align_train(params, align_samples(),
                      AlignTrainConfig(steps=200, batch=16, lr_init=5e-3,
                                       lr_min=5e-4, seed=0),
                      out_dir=str(tmp_path))
    assert np.isfinite(res.final_loss)
    assert res.final_accuracy >= 0.6
    from modeformer.archive import read_csv
    header, rows = read_csv(res.csv_path)
    assert header == ["step", "lr", "loss", "retrieval_acc"]
    assert rows


def test_align_train_validation():
    params = tiny_aligner()
    with pytest.raises(ShapeError):
        align_train(params, align_samples()[:1], AlignTrainConfig(steps=1))
    lonely = [("a", np.zeros((1, 16)), np.zeros((1, 16))),
              ("b", np.zeros((1, 32)), np.zeros((1, 32)))]
    with pytest.raises(ShapeError):
        align_train(params, lonely, AlignTrainConfig(steps=1, batch=4))


def test_aligner_checkpoint_round_trip(tmp_path):
    params = tiny_aligner(k=3, channels=2, seed=9, lam=0.2, tau=0.05)
    p = str(tmp_path / "aligner.ckpt")
    save_aligner_params(p, params)
    back = load_aligner_params(p)
    assert back.config == params.config
    assert back.selection == params.selection
    assert back.ndim == params.ndim and back.n_channels == params.n_channels
    for name, t in params.parameters().items():
        assert back.parameters()[name].data.tobytes() == t.data.tobytes()


def test_aligner_checkpoint_kind_guard(tmp_path):
    from modeformer.archive import save_checkpoint
    p = str(tmp_path / "other.ckpt")
    save_checkpoint(p, {"w": np.zeros(2)}, {"kind": "model"})
    with pytest.raises(ValueError):
        load_aligner_params(p)


# --------------------------------------------------------------------------
# classification probe

def separable_features(n_per=40, seed=0):
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for k, fam in enumerate(["advection", "diffusion", "burgers"]):
        center = np.zeros(6)
        center[k] = 3.0
        for _ in range(n_per):
            feats.append(center + 0.3 * rng.normal(size=6))
            labels.append(fam)
    return feats, labels


def test_probe_separates_clean_classes():
    feats, labels = separable_features()
    res = classify_probe(feats, labels, steps=300)
    assert res.accuracy == 1.0
    assert res.classes == ["advection", "burgers", "diffusion"]
    assert res.confusion.sum() == 24                  # 20% of 120
    assert np.trace(res.confusion) == 24


def test_probe_shuffled_labels_near_chance():
    feats, labels = separable_features()
    shuffled = list(np.random.default_rng(1).permutation(labels))
    res = classify_probe(feats, shuffled, steps=300)
    assert res.accuracy < 0.65


def test_probe_validation():
    feats, labels = separable_features(n_per=3)
    with pytest.raises(ValueError):
        classify_probe(feats, ["same"] * len(feats))
    with pytest.raises(ShapeError):
        classify_probe(feats, labels[:-1])
    with pytest.raises(ValueError):
        classify_probe(feats[:4], ["a", "a", "a", "b"])   # class b has 1


# --------------------------------------------------------------------------
# fine-tuning loop plumbing

def test_finetune_needs_aligner_when_aligned():
    bundle = make_bundle(ModelConfig(layers=1, hidden=16, heads=2,
                                     intermediate=32),
                         {1: dict(k=3, policy="fixed-low", width=8)}, seed=0)
    with pytest.raises(ShapeError):
        finetune(bundle, [], TrainConfig(total_steps=1), None, "/tmp/x",
                 use_alignment=True)


def test_finetune_logs_objective_and_nrmse(tmp_path):
    from modeformer.archive import read_csv
    trajs = [gen_trajectory(PdeSpec("diffusion1d", {"nu": 0.02 + 0.01 * i},
                                    (16,), (1.0,), 4, 0.1, i, ic_modes=3))
             for i in range(4)]
    bundle = make_bundle(ModelConfig(layers=1, hidden=16, heads=2,
                                     intermediate=32),
                         {1: dict(k=3, policy="fixed-low", width=8)}, seed=0)
    params = tiny_aligner(k=3)
    cfg = TrainConfig(total_steps=6, lr_init=1e-4, seed=0,
                      holdout_fraction=0.0, log_every=2,
                      batch_size_by_dim={1: 2})
    res = finetune(bundle, trajs, cfg, params, str(tmp_path / "ft"),
                   use_alignment=True)
    header, rows = read_csv(res.csv_path)
    assert header == ["step", "lr", "dim", "family", "loss", "nrmse"]
    # objective = L_sim - s differs from its own L_sim component
    assert all(r[4] != r[5] for r in rows)

    res2 = finetune(bundle, trajs, cfg, None, str(tmp_path / "plain"),
                    use_alignment=False)
    _, rows2 = read_csv(res2.csv_path)
    assert all(r[4] == r[5] for r in rows2)
