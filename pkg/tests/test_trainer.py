"""Loss worked examples, optimizer recurrence, and training-loop contracts.

The reproducibility tests compare file bytes, not parsed values: two runs
with one seed under the deterministic flag must agree to the last bit, and a
resumed run must rejoin the original trace exactly.
"""

import numpy as np
import pytest

from modeformer.archive import read_csv, save_checkpoint
from modeformer.codec import encode_tokens, decode_tokens
from modeformer.datagen import PdeSpec, Trajectory, gen_trajectory
from modeformer.model import ModelConfig, forward, temporal_mask
from modeformer.tensor import (Graph, ShapeError, Tensor,
                               finite_diff_gradient)
from modeformer.trainer import (Adam, PretrainResult, TrainConfig, cosine_lr,
                                load_bundle, load_manifest,
                                load_training_checkpoint, make_bundle, nrmse,
                                pretrain, split_heldout, train_step)

RNG = np.random.default_rng(77)


def batch(*shape):
    return RNG.normal(size=shape)


# --------------------------------------------------------------------------
# nrmse

def test_nrmse_zero_when_exact():
    t = batch(2, 3, 1, 8)
    assert abs(float(nrmse(t.copy(), t).data)) < 1e-15


def test_nrmse_zero_prediction_gives_one():
    t = batch(1, 2, 2, 16)
    got = float(nrmse(np.zeros_like(t), t).data)
    assert abs(got - 1.0) < 1e-12


def test_nrmse_hand_example():
    """|err| = 2 everywhere, rms(target) = 3 -> nrmse = 2/3."""
    target = np.full((1, 1, 1, 4), 3.0)
    pred = np.full((1, 1, 1, 4), 5.0)
    assert abs(float(nrmse(pred, target).data) - 2.0 / 3.0) < 1e-14


def test_nrmse_scale_invariant():
    t = batch(2, 2, 1, 8)
    p = t + 0.1 * batch(2, 2, 1, 8)
    a = float(nrmse(p, t).data)
    b = float(nrmse(1e3 * p, 1e3 * t).data)
    assert abs(a - b) / a < 1e-12


def test_nrmse_sigma_floor():
    """Zero target: the denominator bottoms out at the floor."""
    target = np.zeros((1, 1, 1, 4))
    pred = np.full((1, 1, 1, 4), 1e-8)
    got = float(nrmse(pred, target, sigma_floor=1e-8).data)
    assert abs(got - 1.0) < 1e-12


def test_nrmse_per_frame_consistent_with_pooled():
    """Pooled rms over frames = sqrt(mean of squared per-frame rms)."""
    t, p = batch(2, 4, 3, 8), batch(2, 4, 3, 8)
    per = nrmse(p, t, per_frame=True).data          # [B, P, C]
    pooled = nrmse(p, t).data
    sigma = np.sqrt(np.mean(t * t, axis=(1, 3)))
    recon = np.mean(np.sqrt(np.mean((per * sigma[:, None, :]) ** 2, axis=1))
                    / sigma)
    assert abs(recon - float(pooled)) < 1e-12


def test_nrmse_channel_mask():
    t, p = batch(2, 3, 2, 8), batch(2, 3, 2, 8)
    only0 = float(nrmse(p, t, channel_mask=np.array([1.0, 0.0])).data)
    direct = float(nrmse(p[:, :, :1], t[:, :, :1]).data)
    assert abs(only0 - direct) < 1e-12
    with pytest.raises(ShapeError):
        nrmse(p, t, channel_mask=np.zeros(2))


def test_nrmse_validation():
    with pytest.raises(ShapeError):
        nrmse(np.zeros((2, 3, 8)), np.zeros((2, 3, 8)))        # rank < 4
    with pytest.raises(ShapeError):
        nrmse(np.zeros((1, 2, 1, 8)), np.zeros((1, 2, 1, 4)))  # shape mismatch
    with pytest.raises(ShapeError):
        nrmse(np.zeros((2, 2, 1, 8)), np.zeros((2, 2, 1, 8)),
              sigma=np.ones(3))                                # sigma shape


def test_nrmse_gradient():
    t = batch(1, 2, 1, 8)

    def loss_of(x):
        return nrmse(x, t)

    x = Tensor(batch(1, 2, 1, 8), requires_grad=True)
    with Graph() as g:
        got = g.backward(nrmse(x, t))[x]
    want = finite_diff_gradient(loss_of, x)
    assert np.abs(got - want).max() / np.abs(want).max() < 1e-5


# --------------------------------------------------------------------------
# schedule and optimizer

def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-20)
    mid = cosine_lr(50, 100, 1e-3, 1e-5)
    assert mid == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)
    assert cosine_lr(200, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(-5, 100, 1e-3, 1e-5) == 1e-3
    assert cosine_lr(3, 0, 1e-3, 1e-5) == 1e-5


def test_cosine_monotone():
    vals = [cosine_lr(s, 50) for s in range(51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_adam_hand_recurrence():
    w = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam(beta1=0.9, beta2=0.999, eps=1e-8)
    opt.step({"w": w}, {"w": np.ones(1)}, lr=0.1)
    # t=1: m_hat = v_hat = 1 after bias correction
    assert abs(w.data[0] - (-0.1 / (1.0 + 1e-8))) < 1e-16
    opt.step({"w": w}, {"w": np.full(1, 2.0)}, lr=0.1)
    m = 0.9 * 0.1 + 0.1 * 2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    m_hat = m / (1 - 0.9 ** 2)
    v_hat = v / (1 - 0.999 ** 2)
    want = -0.1 / (1 + 1e-8) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert abs(w.data[0] - want) < 1e-15


def test_adam_per_name_step_counters():
    a = Tensor(np.zeros(1), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam()
    opt.step({"a": a, "b": b}, {"a": np.ones(1)}, 1e-3)
    opt.step({"a": a, "b": b}, {"a": np.ones(1), "b": np.ones(1)}, 1e-3)
    assert opt.t == {"a": 2, "b": 1}


def test_adam_zero_lr_is_identity():
    w = Tensor(batch(3, 3), requires_grad=True)
    before = w.data.tobytes()
    Adam().step({"w": w}, {"w": batch(3, 3)}, lr=0.0)
    assert w.data.tobytes() == before


def test_adam_shape_mismatch():
    w = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ShapeError):
        Adam().step({"w": w}, {"w": np.zeros(3)}, 1e-3)


# --------------------------------------------------------------------------
# train_step and corpus plumbing

def tiny_bundle(layers=1, hidden=16, seed=0):
    return make_bundle(ModelConfig(layers=layers, hidden=hidden, heads=2,
                                   intermediate=2 * hidden),
                       {1: dict(k=4, policy="fixed-low", width=8)}, seed=seed)


def diffusion_corpus(n=8, n_steps=6, extents=(32,), seed0=0):
    out = []
    for i in range(n):
        spec = PdeSpec("diffusion1d", {"nu": 0.02 + 0.01 * i}, extents, (1.0,),
                       n_steps=n_steps, dt=0.1, seed=seed0 + i, ic_modes=3)
        out.append(gen_trajectory(spec))
    return out


def test_train_step_validation():
    bundle = tiny_bundle()
    opt, cfg = Adam(), TrainConfig()
    with pytest.raises(ShapeError):
        train_step(bundle, batch(2, 1, 16), opt, 1e-4, cfg)       # rank < 4
    with pytest.raises(ShapeError):
        train_step(bundle, batch(2, 1, 1, 16), opt, 1e-4, cfg)    # T < 2
    with pytest.raises(ShapeError):
        train_step(bundle, batch(2, 3, 1, 8, 8), opt, 1e-4, cfg)  # no 2d codec


def test_train_step_reduces_loss():
    corpus = np.stack([t.values for t in diffusion_corpus()])
    bundle = tiny_bundle(hidden=32)
    opt, cfg = Adam(), TrainConfig(lr_init=3e-3, lr_min=3e-4, total_steps=300)
    first = train_step(bundle, corpus, opt, 3e-3, cfg)
    loss = first
    for step in range(299):
        loss = train_step(bundle, corpus, opt,
                          cosine_lr(step, 300, 3e-3, 3e-4), cfg)
    assert np.isfinite(loss)
    assert loss < 0.5 * first


def test_split_heldout_partition():
    trajs = diffusion_corpus(n=10)
    train, held = split_heldout(trajs, 0.2, seed=4)
    assert len(held) == 2 and len(train) == 8
    ids = lambda ts: sorted(id(t) for t in ts)
    assert sorted(ids(train) + ids(held)) == ids(trajs)
    train2, held2 = split_heldout(trajs, 0.2, seed=4)
    assert ids(train2) == ids(train) and ids(held2) == ids(held)


def test_split_heldout_singleton_family_kept():
    trajs = diffusion_corpus(n=1)
    train, held = split_heldout(trajs, 0.5, seed=0)
    assert len(train) == 1 and not held


def test_load_manifest(tmp_path):
    from modeformer.archive import write_archive
    trajs = diffusion_corpus(n=2, n_steps=3)
    for i, t in enumerate(trajs):
        write_archive(str(tmp_path / f"d{i}.bin"), t)
    (tmp_path / "manifest.json").write_text(
        '{"archives": ["d0.bin", "d1.bin"]}')
    back = load_manifest(str(tmp_path / "manifest.json"))
    assert len(back) == 2
    assert back[0].spec == trajs[0].spec


# --------------------------------------------------------------------------
# checkpoints

def test_bundle_checkpoint_round_trip(tmp_path):
    from modeformer.trainer import save_training_checkpoint
    bundle = tiny_bundle(layers=2, seed=5)
    p = str(tmp_path / "b.ckpt")
    save_training_checkpoint(p, bundle, None, step=0)
    back, meta = load_bundle(p)
    assert back.config == bundle.config
    for name, t in bundle.parameters().items():
        assert back.parameters()[name].data.tobytes() == t.data.tobytes()
    assert meta["step"] == 0


def test_bundle_checkpoint_missing_param(tmp_path):
    from modeformer.archive import load_checkpoint
    from modeformer.trainer import save_training_checkpoint
    bundle = tiny_bundle()
    p = str(tmp_path / "b.ckpt")
    save_training_checkpoint(p, bundle, None, step=0)
    arrays, meta = load_checkpoint(p)
    victim = next(iter(bundle.parameters()))
    arrays.pop(victim)
    p2 = str(tmp_path / "b2.ckpt")
    save_checkpoint(p2, arrays, meta)
    with pytest.raises(ShapeError, match="missing parameter"):
        load_bundle(p2)


def test_optimizer_state_round_trip(tmp_path):
    from modeformer.trainer import save_training_checkpoint
    bundle = tiny_bundle()
    opt, cfg = Adam(), TrainConfig()
    corpus = np.stack([t.values for t in diffusion_corpus(n=4)])
    for _ in range(3):
        train_step(bundle, corpus, opt, 1e-3, cfg)
    p = str(tmp_path / "t.ckpt")
    save_training_checkpoint(p, bundle, opt, step=3, train_config=cfg)
    _, opt2, meta = load_training_checkpoint(p)
    assert opt2.t == opt.t
    assert set(opt2.m) == set(opt.m)
    for k in opt.m:
        assert opt2.m[k].tobytes() == opt.m[k].tobytes()
        assert opt2.v[k].tobytes() == opt.v[k].tobytes()
    assert meta["train_config"]["total_steps"] == cfg.total_steps


# --------------------------------------------------------------------------
# pretrain loop

def quick_cfg(**kw):
    base = dict(total_steps=30, lr_init=1e-3, lr_min=1e-4, seed=11,
                holdout_fraction=0.0, log_every=10, deterministic=True,
                batch_size_by_dim={1: 4})
    base.update(kw)
    return TrainConfig(**base)


def test_pretrain_rerun_is_bitwise(tmp_path):
    trajs = diffusion_corpus(n=6, n_steps=4)
    outs = []
    for sub in ("a", "b"):
        bundle = tiny_bundle(seed=2)
        res = pretrain(bundle, trajs, quick_cfg(), str(tmp_path / sub))
        outs.append(res)
    csv_a = open(outs[0].csv_path, "rb").read()
    csv_b = open(outs[1].csv_path, "rb").read()
    assert csv_a == csv_b
    ck_a = open(outs[0].checkpoint_path, "rb").read()
    ck_b = open(outs[1].checkpoint_path, "rb").read()
    assert ck_a == ck_b


def test_pretrain_resume_rejoins_trace(tmp_path):
    trajs = diffusion_corpus(n=6, n_steps=4)
    cfg = quick_cfg(total_steps=40, checkpoint_every=20)

    bundle = tiny_bundle(seed=2)
    full = pretrain(bundle, trajs, cfg, str(tmp_path / "full"))

    resumed = pretrain(tiny_bundle(seed=2), trajs, cfg, str(tmp_path / "res"),
                       resume_from=str(tmp_path / "full" / "ckpt_000020.bin"))
    assert resumed.steps_run == 20
    assert resumed.final_loss == full.final_loss
    assert (open(resumed.checkpoint_path, "rb").read()
            == open(full.checkpoint_path, "rb").read())
    _, rows_full = read_csv(full.csv_path)
    _, rows_res = read_csv(resumed.csv_path)
    tail = {r[0]: r for r in rows_full if int(r[0]) > 20}
    assert {r[0]: r for r in rows_res} == tail


def test_pretrain_holdout_and_result_fields(tmp_path):
    trajs = diffusion_corpus(n=10, n_steps=4)
    res = pretrain(tiny_bundle(), trajs, quick_cfg(holdout_fraction=0.2),
                   str(tmp_path))
    assert isinstance(res, PretrainResult)
    assert len(res.heldout) == 2
    assert res.steps_run == 30
    header, rows = read_csv(res.csv_path)
    assert header == ["step", "lr", "dim", "family", "loss", "nrmse"]
    assert [r[0] for r in rows] == ["10", "20", "30"]
    assert all(r[2] == "1" and r[3] == "diffusion1d" for r in rows)


def test_pretrain_max_frames_crops(tmp_path):
    trajs = diffusion_corpus(n=4, n_steps=8)
    res = pretrain(tiny_bundle(), trajs, quick_cfg(total_steps=5, max_frames=3,
                                                   log_every=1),
                   str(tmp_path))
    assert np.isfinite(res.final_loss)


def test_pretrain_empty_split_rejected(tmp_path):
    with pytest.raises(ShapeError, match="empty"):
        pretrain(tiny_bundle(), [], quick_cfg(), str(tmp_path))


# --------------------------------------------------------------------------
# pad tokens stay out of the loss

def test_padded_quantity_leaves_loss_unchanged():
    """An all-zero pad quantity, blocked by the attention pad mask and dropped
    by the channel mask, reproduces the unpadded loss to float noise.  (Not
    bitwise: the pad column changes reduction lengths inside attention, which
    regroups SIMD lanes; the contract is agreement at 1e-10.)"""
    bundle = make_bundle(ModelConfig(layers=1, hidden=16, heads=2,
                                     intermediate=32),
                         {1: dict(k=4, policy="fixed-low", width=8)}, seed=0)
    codec = bundle.codecs[1]
    vals = batch(2, 3, 1, 16)
    t_steps, n_q = 3, 1

    def loss_of(values, pad):
        b, t, c = values.shape[:3]
        pad_mask = None
        if pad:
            pad_mask = np.tile(np.array([False, True]), t)
        mask = temporal_mask(t, c, pad_mask)
        with Graph():
            toks = encode_tokens(values, codec)
            out = forward(toks, bundle.model, mask=mask)
            head = out.embeddings.slice((None, 0, None),
                                        (None, (t - 1) * c, None))
            pred = decode_tokens(head, codec, t - 1, c, values.shape[3:],
                                 freqs=toks.freqs)
            cm = np.array([1.0] + [0.0] * (c - 1)) if pad else None
            return float(nrmse(pred, values[:, 1:], channel_mask=cm).data)

    plain = loss_of(vals, pad=False)
    padded_vals = np.concatenate([vals, np.zeros_like(vals)], axis=2)
    padded = loss_of(padded_vals, pad=True)
    assert abs(plain - padded) / plain < 1e-10
