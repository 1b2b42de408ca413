import math
import struct

import numpy as np
import pytest

from stenoseg.autodiff import Tensor, backward, check_gradients, precision
from stenoseg.data import Sample, make_folds, synthetic_dataset
from stenoseg.errors import FoldError, FormatError, NumericError, ShapeError
from stenoseg.models import Variant, build, tiny_spec
from stenoseg.training import (
    METRICS_HEADER,
    LossConfig,
    OptimConfig,
    TrainState,
    clip_gradients,
    combined_loss,
    cross_entropy_loss,
    dice_loss,
    downscale_mask,
    load_checkpoint,
    optimizer_update,
    read_metrics_log,
    restore,
    run_fold,
    save_checkpoint,
    train,
    train_step,
)


def tiny_samples(n=8, size=16, seed=0):
    images, masks, _ = synthetic_dataset(n, size, seed=seed)
    return [Sample(f"s{i}", (im / 255.0).astype(np.float32)[None], m) for i, (im, m) in enumerate(zip(images, masks))]


def hard_logits(mask, margin=50.0):
    fg = np.where(mask, margin, -margin)
    return np.stack([-fg, fg], axis=1).astype(np.float64)


# --------------------------------------------------------------- scalar oracles
def scalar_probs(z):
    B, _, H, W = z.shape
    p = np.zeros((B, H, W))
    for b in range(B):
        for i in range(H):
            for j in range(W):
                e0, e1 = math.exp(z[b, 0, i, j]), math.exp(z[b, 1, i, j])
                p[b, i, j] = e1 / (e0 + e1)
    return p


def scalar_dice(z, m, eps):
    p = scalar_probs(z)
    inter = sp = sm = 0.0
    for pv, mv in zip(p.ravel().tolist(), m.ravel().tolist()):
        inter += pv * mv
        sp += pv
        sm += mv
    return 1 - (2 * inter + eps) / (sp + sm + eps)


def scalar_ce(z, m):
    p = scalar_probs(z)
    total = 0.0
    for pv, mv in zip(p.ravel().tolist(), m.ravel().tolist()):
        total -= math.log(pv if mv else 1 - pv)
    return total / m.size


# ------------------------------------------------------------------- losses
def test_dice_perfect_prediction():
    m = np.zeros((1, 4, 4), dtype=np.uint8)
    m[0, 1:3, 1:3] = 1
    assert dice_loss(Tensor(hard_logits(m)), m, eps=1.0).item() < 1e-6


def test_dice_half_overlap():
    pred = np.array([[[1, 1, 0, 0]]])
    gt = np.array([[[0, 1, 1, 0]]])
    assert dice_loss(Tensor(hard_logits(pred)), gt, eps=0.0).item() == pytest.approx(0.5, abs=1e-12)


def test_cross_entropy_examples():
    m = np.array([[[0, 1], [1, 0]]])
    assert cross_entropy_loss(Tensor(np.zeros((1, 2, 2, 2))), m).item() == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy_loss(Tensor(hard_logits(m, 10.0)), m).item() < 1e-4


def test_losses_match_scalar_loops(rng):
    z = rng.normal(size=(2, 2, 5, 6)) * 2
    m = rng.integers(0, 2, size=(2, 5, 6))
    assert abs(dice_loss(Tensor(z), m, 1.0).item() - scalar_dice(z, m, 1.0)) < 1e-12
    assert abs(cross_entropy_loss(Tensor(z), m).item() - scalar_ce(z, m)) < 1e-10


def test_loss_shape_errors():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((1, 2, 4, 4))), np.zeros((1, 4, 5)))
    with pytest.raises(ShapeError):
        cross_entropy_loss(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 4, 4)))
    with pytest.raises(ShapeError):
        downscale_mask(np.zeros((1, 8, 8)), (3, 3))


def test_downscale_picks_block_centres():
    m = np.arange(64).reshape(1, 8, 8)
    np.testing.assert_array_equal(downscale_mask(m, (4, 4))[0, 0], [9, 11, 13, 15])
    np.testing.assert_array_equal(downscale_mask(m, (2, 2))[0, :, 0], [18, 50])


def test_combined_without_aux(rng):
    z = Tensor(rng.normal(size=(1, 2, 4, 4)))
    m = rng.integers(0, 2, size=(1, 4, 4))
    cfg = LossConfig()
    want = dice_loss(z, m, 1.0).item() + cross_entropy_loss(z, m).item()
    assert combined_loss(z, [], m, cfg).item() == want
    aux = [Tensor(rng.normal(size=(1, 2, 2, 2)))]
    assert combined_loss(z, aux, m, LossConfig(gamma=0.0)).item() == want


def test_combined_two_aux(rng):
    m = rng.integers(0, 2, size=(1, 8, 8))
    z0, z1, z2 = (rng.normal(size=(1, 2, s, s)) for s in (8, 4, 2))
    levels = [(z0, m), (z1, m[:, 1::2, 1::2]), (z2, m[:, 2::4, 2::4])]
    parts = [scalar_dice(z, t, 1.0) + scalar_ce(z, t) for z, t in levels]
    want = (parts[0] + 0.5 * parts[1] + 0.25 * parts[2]) / 1.75
    got = combined_loss(Tensor(z0), [Tensor(z1), Tensor(z2)], m, LossConfig(gamma=0.5)).item()
    assert abs(got - want) < 1e-12


def test_loss_gradients(rng):
    m = rng.integers(0, 2, size=(2, 4, 4))
    z = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
    a1 = Tensor(rng.normal(size=(2, 2, 2, 2)), requires_grad=True)
    for fn, inputs in [
        (lambda: dice_loss(z, m), [z]),
        (lambda: cross_entropy_loss(z, m), [z]),
        (lambda: combined_loss(z, [a1], m, LossConfig()), [z, a1]),
    ]:
        assert check_gradients(fn, inputs).max_rel_err < 1e-5


def test_dice_monotone_under_single_pixel_moves(rng):
    m = rng.integers(0, 2, size=(1, 6, 6))
    m[0, 0, 0], m[0, 0, 1] = 1, 0
    z = rng.normal(size=(1, 2, 6, 6))
    base = dice_loss(Tensor(z), m).item()
    for _ in range(30):
        i, j = rng.integers(0, 6, 2)
        moved = z.copy()
        moved[0, 1, i, j] += 0.5 if m[0, i, j] else -0.5
        after = dice_loss(Tensor(moved), m).item()
        assert after < base
        z, base = moved, after


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(dice_weight=0, ce_weight=0)
    with pytest.raises(ValueError):
        OptimConfig(steps=0)
    with pytest.raises(ValueError):
        OptimConfig(algorithm="rmsprop")


# ---------------------------------------------------------------- optimizer
def test_zero_learning_rate_keeps_parameters():
    samples = tiny_samples(4)
    net = build(tiny_spec(Variant.SWIN_UMAMBA), seed=1)
    before = net.state_dict()
    train(net, samples, OptimConfig(lr=0.0, steps=2, batch_size=2), LossConfig())
    after = net.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_sgd_quadratic_geometric_decay():
    with precision(np.float64):
        w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    cfg = OptimConfig(algorithm="sgd", lr=0.1, momentum=0.0, weight_decay=0.0)
    moments, c = {}, 1.5
    for k in range(1, 21):
        w.grad = None
        backward((w * w).sum() * c)
        optimizer_update({"w": w}, moments, k, cfg)
        np.testing.assert_allclose(w.data, np.array([3.0, -2.0]) * (1 - 2 * c * 0.1) ** k, rtol=1e-12)


def test_adam_first_step_moves_by_lr():
    with precision(np.float64):
        w = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    w.grad = np.array([0.3, -4.0, 1e-3])
    optimizer_update({"w": w}, {}, 1, OptimConfig(weight_decay=0.0))
    np.testing.assert_allclose(w.data, [1.0 - 1e-3, -1.0 + 1e-3, 0.5 - 1e-3], rtol=1e-6)


def test_gradient_clipping():
    g = [np.array([3.0, 0.0]), np.array([[4.0]])]
    assert clip_gradients(g, 1.0) == 5.0
    assert math.isclose(math.sqrt(sum((x**2).sum() for x in g)), 1.0, rel_tol=1e-9)


def test_seeded_training_is_deterministic():
    samples = tiny_samples(6)
    runs = []
    for _ in range(2):
        net = build(tiny_spec(Variant.LIGHTM_UNET), seed=0)
        runs.append(train(net, samples, OptimConfig(steps=4, batch_size=2), LossConfig()).losses)
    assert runs[0] == runs[1]


def test_non_finite_parameter_is_named():
    samples = tiny_samples(2)
    net = build(tiny_spec(Variant.UMAMBA_BOT))
    name, p = next(iter(net.named_parameters()))
    p.data[...] = np.nan
    batch = (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))
    with pytest.raises(NumericError) as info:
        train_step(TrainState.fresh(0), net, batch, OptimConfig(), LossConfig())
    assert info.value.parameter == name
    assert name in str(info.value)


# -------------------------------------------------------------- checkpoints
def trained(steps=3, variant=Variant.SWIN_UMAMBA_D):
    samples = tiny_samples(6)
    net = build(tiny_spec(variant), seed=0)
    state = train(net, samples, OptimConfig(steps=steps, batch_size=2), LossConfig())
    return samples, net, state


def test_checkpoint_round_trip(tmp_path):
    _, net, state = trained()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, net, state, {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.spec == net.spec and ck.extra == {"note": "x"}
    own = net.state_dict()
    assert list(ck.params) == list(own)
    assert all(ck.params[k].tobytes() == own[k].tobytes() and ck.params[k].dtype == own[k].dtype for k in own)
    assert set(ck.state.moments) == set(state.moments)
    assert all(ck.state.moments[k].tobytes() == state.moments[k].tobytes() for k in state.moments)
    assert ck.state.step == state.step and ck.state.losses == state.losses
    assert ck.state.rng.bit_generator.state == state.rng.bit_generator.state
    save_checkpoint(tmp_path / "b.ckpt", restore(ck), ck.state, ck.extra)
    assert (tmp_path / "b.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path):
    _, net, state = trained(1, Variant.UMAMBA_BOT)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, net, state)
    raw = path.read_bytes()
    cases = {
        "magic": b"CKPT9" + raw[5:],
        "version": raw[:5] + struct.pack("<I", 2) + raw[9:],
        "truncated": raw[:-7],
        "trailing": raw + b"\0",
    }
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.ckpt"
        bad.write_bytes(blob)
        with pytest.raises(FormatError):
            load_checkpoint(bad)


def test_resume_continues_trajectory(tmp_path):
    samples = tiny_samples(6)
    optim = OptimConfig(steps=6, batch_size=2)
    full = train(build(tiny_spec(Variant.UMAMBA_ENC), seed=0), samples, optim, LossConfig())

    net = build(tiny_spec(Variant.UMAMBA_ENC), seed=0)
    half = train(net, samples, optim, LossConfig(), until=3)
    save_checkpoint(tmp_path / "h.ckpt", net, half)
    ck = load_checkpoint(tmp_path / "h.ckpt")
    resumed = train(restore(ck), samples, optim, LossConfig(), state=ck.state)
    assert resumed.losses == full.losses


# -------------------------------------------------------------- fold driver
def test_run_fold_rejects_leaky_plan(tmp_path):
    samples = {s.id: s for s in tiny_samples(4)}
    with pytest.raises(FoldError):
        run_fold(0, ["s0", "s1", "s2"], ["s1"], samples, tiny_spec(Variant.UMAMBA_BOT),
                 OptimConfig(steps=1), LossConfig(), tmp_path)
    assert not any(tmp_path.iterdir())


def test_five_fold_run(tmp_path):
    samples = {s.id: s for s in tiny_samples(10)}
    plan = make_folds(sorted(samples), 5, seed=0)
    optim = OptimConfig(steps=2, batch_size=4)
    for k, (tr, va) in enumerate(plan.folds):
        res = run_fold(k, tr, va, samples, tiny_spec(Variant.UMAMBA_BOT), optim, LossConfig(), tmp_path / f"fold-{k}")
        assert res.checkpoint.exists()
    assert len(list(tmp_path.glob("fold-*/best.ckpt"))) == 5
    logs = sorted(tmp_path.glob("fold-*/metrics.csv"))
    assert len(logs) == 5
    assert logs[0].read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    rows = read_metrics_log(logs[3])
    assert rows[0]["fold"] == "3" and rows[0]["epoch"] == "1"


def test_run_fold_resume_matches_uninterrupted(tmp_path):
    samples = {s.id: s for s in tiny_samples(6)}
    ids = sorted(samples)
    spec = tiny_spec(Variant.UMAMBA_BOT)
    run_fold(0, ids[:4], ids[4:], samples, spec, OptimConfig(steps=4, batch_size=2), LossConfig(), tmp_path / "a")
    run_fold(0, ids[:4], ids[4:], samples, spec, OptimConfig(steps=2, batch_size=2), LossConfig(), tmp_path / "b")
    run_fold(0, ids[:4], ids[4:], samples, spec, OptimConfig(steps=4, batch_size=2), LossConfig(), tmp_path / "b",
             resume=True)
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()
