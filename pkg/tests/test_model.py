import math
from dataclasses import replace

import numpy as np
import pytest

from chiptherm.fields import FieldKind, GridSpec, ScalarField
from chiptherm.model import (ArchConfig, ConcatMode, Normalization, PairSet, RolloutError,
                             SurrogateModel, TrainConfig, TrainingDiverged, forward, gradients,
                             init_model, loss, param_layout, positional_encoding,
                             predict_normalized, rollout, train)
from chiptherm.model.autodiff import NonFiniteActivation, pad_edge
from chiptherm.model.checkpoint import CheckpointError, from_bytes, load, save, to_bytes

TINY = ArchConfig(base_channels=2, depth=2, dilation_rates=(1, 2), pos_dim=4, dropout_rate=0.25)


def naive_lap(v):
    H, W = v.shape
    out = np.zeros_like(v)
    for i in range(H):
        for j in range(W):
            c = v[i, j]
            out[i, j] = (v[max(i - 1, 0), j] + v[min(i + 1, H - 1), j] + v[i, max(j - 1, 0)]
                         + v[i, min(j + 1, W - 1)] - 4 * c)
    return out


def random_batch(rng, n=2, size=8, kappa=2.0):
    q = rng.random((n, size, size))
    return PairSet(q + 0.01 * rng.normal(size=q.shape), rng.random((n, size, size)),
                   rng.random((n, size, size)), q + 0.05 * rng.random((n, size, size)), kappa, q)


def perturbed(arch, seed=0, scale=0.3):
    m = init_model(arch, seed)
    r = np.random.default_rng(seed + 100)
    return SurrogateModel(arch, m.params + scale * r.normal(size=m.param_count), m.norm)


# --- positional encoding ------------------------------------------------------

def test_positional_encoding_examples():
    pe = positional_encoding(GridSpec(6, 5), 8)
    assert pe.shape == (8, 5, 6)
    assert np.all(pe[0::2, 0, 0] == 0.0) and np.all(pe[1::2, 0, 0] == 1.0)
    np.testing.assert_array_equal(pe[0], np.broadcast_to(np.sin(np.arange(6.0)), (5, 6)))
    np.testing.assert_array_equal(pe[2], np.broadcast_to(np.sin(np.arange(5.0))[:, None], (5, 6)))
    np.testing.assert_allclose(pe[4, 0, 3], math.sin(3 / 10000 ** (2 / 8)), rtol=1e-15)
    for h, w, d in ((3, 3, 4), (64, 64, 16), (7, 100, 32)):
        v = positional_encoding((h, w), d)
        assert v.min() >= -1.0 and v.max() <= 1.0
    with pytest.raises(ValueError):
        positional_encoding((4, 4), 6)
    with pytest.raises(ValueError):
        pe[0, 0, 0] = 2.0


# --- architecture --------------------------------------------------------------

@pytest.mark.parametrize("depth", [1, 2, 3])
@pytest.mark.parametrize("mode", list(ConcatMode))
def test_output_shape_matches_input(depth, mode):
    arch = ArchConfig(base_channels=2, depth=depth, dilation_rates=(1, 2, 4)[:depth], pos_dim=4,
                      concat_mode=mode)
    m = init_model(arch, 1)
    r = np.random.default_rng(depth)
    for size in (8, 16, 32, 64):
        for h, w in ((size, size), (size, 8)):
            q = r.random((h, w))
            assert predict_normalized(m, q, q, q).shape == (h, w)


def test_bilinear_decoder_shapes():
    arch = ArchConfig(base_channels=2, pos_dim=4, bilinear_decoder=True)
    q = np.random.default_rng(0).random((2, 16, 24))
    assert predict_normalized(init_model(arch), q, q, q).shape == (2, 16, 24)


def test_indivisible_grid_rejected():
    m = init_model(ArchConfig(base_channels=2, pos_dim=4))
    with pytest.raises(ValueError):
        predict_normalized(m, np.zeros((12, 12)), np.zeros((12, 12)), np.zeros((12, 12)))
    with pytest.raises(ValueError):
        predict_normalized(m, np.zeros((16, 16)), np.zeros((16, 8)), np.zeros((16, 16)))


def test_ablation_parameter_counts():
    base = ArchConfig()
    c = base.widths()[-1]
    full = init_model(base).param_count
    no_pair = init_model(replace(base, use_pair_conditioning=False)).param_count
    # the fusion conv loses the two reference-pair feature blocks
    assert full - no_pair == 2 * c * c * 9
    separate = init_model(replace(base, shared_encoder=False)).param_count
    enc = sum(int(np.prod(s)) for n, s in param_layout(base) if n.startswith("enc0."))
    assert separate - full == 2 * enc
    pixel = init_model(replace(base, concat_mode=ConcatMode.PixelLevel)).param_count
    assert pixel != full
    # pixel-level stacking widens the first conv (3 input channels) and narrows the fusion conv
    first = base.widths()[0]
    assert pixel == no_pair + 2 * first * 9


def test_arch_validation():
    for bad in ({"pos_dim": 6}, {"depth": 0, "dilation_rates": ()}, {"base_channels": 0},
                {"dilation_rates": (1, 2)}, {"dropout_rate": 1.0}, {"padding": "reflect"}):
        with pytest.raises(ValueError):
            ArchConfig(**bad)
    arch = ArchConfig(concat_mode=ConcatMode.PixelLevel, bilinear_decoder=True)
    assert ArchConfig.from_record(arch.to_record()) == arch


# --- forward ---------------------------------------------------------------------

def test_zero_head_outputs_bias_field(rng):
    m = init_model(TINY, 3)
    m.named()["head.b"][...] = 0.3
    a = predict_normalized(m, rng.random((8, 8)), rng.random((8, 8)), rng.random((8, 8)))
    b = predict_normalized(m, rng.random((8, 8)), rng.random((8, 8)), rng.random((8, 8)))
    assert np.all(a == 0.3) and np.all(b == 0.3)


def test_forward_deterministic_and_pure(rng):
    assert np.array_equal(init_model(TINY, 7).params, init_model(TINY, 7).params)
    assert not np.array_equal(perturbed(TINY, 7).params, perturbed(TINY, 8).params)
    m = perturbed(TINY, 7)
    before = m.params.copy()
    spec = GridSpec(8, 8)
    fields = [ScalarField(spec, FieldKind.TemperatureC, 25 + 30 * rng.random((8, 8))) for _ in range(3)]
    a = forward(m, fields[0], (fields[1], fields[2]))
    b = forward(m, fields[0], (fields[1], fields[2]))
    assert a == b
    assert np.array_equal(m.params, before)
    assert a.spec == spec and a.kind is FieldKind.TemperatureC
    with pytest.raises(ValueError):
        forward(m, fields[0], (fields[1], ScalarField.constant(GridSpec(8, 16), 25.0)))


def test_normalization_round_trip():
    n = Normalization(25.0, 95.0)
    t = np.array([25.0, 60.0, 95.0])
    np.testing.assert_allclose(n.forward(t), [0.0, 0.5, 1.0])
    np.testing.assert_allclose(n.inverse(n.forward(t)), t, rtol=1e-15)
    with pytest.raises(ValueError):
        Normalization(30.0, 30.0)


# --- loss ------------------------------------------------------------------------

def test_loss_zero_for_perfect_stationary_prediction():
    m = init_model(TINY)
    m.named()["head.b"][...] = 0.4
    flat = np.full((3, 8, 8), 0.4)
    batch = PairSet(flat, flat, flat, flat, kappa=50.0)
    vals = loss(m, batch, TrainConfig(lam=0.7))
    assert vals == {"total": 0.0, "l_rmse": 0.0, "l_physics": 0.0}


def test_loss_matches_scalar_oracle(rng):
    m = perturbed(TINY, 2)
    q = rng.random((1, 4 * 2, 4 * 2))[:, :8, :8]
    batch = PairSet(q, rng.random(q.shape), rng.random(q.shape), rng.random(q.shape), 3.5,
                    q + 0.01)
    lam = 0.37
    pred = predict_normalized(m, batch.query, batch.source, batch.target_ref)[0]
    diff = [float(a) - float(b) for a, b in zip(pred.ravel(), batch.truth[0].ravel())]
    l_rmse = math.sqrt(sum(d * d for d in diff) / len(diff))
    lap = naive_lap(pred)
    res = [(float(p) - float(c)) - 3.5 * float(l)
           for p, c, l in zip(pred.ravel(), batch.query_clean[0].ravel(), lap.ravel())]
    l_phys = sum(r * r for r in res) / len(res)
    vals = loss(m, batch, TrainConfig(lam=lam))
    assert abs(vals["l_rmse"] - l_rmse) <= 1e-12
    assert abs(vals["l_physics"] - l_phys) <= 1e-12 * max(1.0, l_phys)
    assert abs(vals["total"] - (l_rmse + lam * l_phys)) <= 1e-12 * max(1.0, l_phys)


def test_loss_decomposition(rng):
    m = perturbed(TINY, 4)
    batch = random_batch(rng, 3)
    for lam in (0.0, 0.01, 0.1, 1.0, 7.3):
        v = loss(m, batch, TrainConfig(lam=lam))
        assert abs(v["total"] - lam * v["l_physics"] - v["l_rmse"]) <= 1e-12
    v = loss(m, batch, TrainConfig(lam=0.0))
    assert v["total"] == v["l_rmse"]
    with pytest.raises(ValueError):
        loss(m, batch.take(slice(0, 0)), TrainConfig())


# --- gradients -------------------------------------------------------------------

def _fd_check(model, batch, cfg, drop_seed=None, h=1e-5):
    def rng():
        return None if drop_seed is None else np.random.default_rng(drop_seed)

    g, _ = gradients(model, batch, cfg, rng())
    p = model.params
    worst = 0.0
    for i in range(model.param_count):
        old = p[i]
        p[i] = old + h
        up = loss(model, batch, cfg, rng())["total"]
        p[i] = old - h
        down = loss(model, batch, cfg, rng())["total"]
        p[i] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-6))
    return worst


@pytest.mark.parametrize("arch", [
    TINY,
    replace(TINY, concat_mode=ConcatMode.PixelLevel),
    replace(TINY, bilinear_decoder=True, shared_encoder=False),
    replace(TINY, use_pair_conditioning=False, padding="zeros"),
], ids=["feature", "pixel", "bilinear-separate", "no-pair-zeros"])
def test_gradient_matches_finite_differences(arch, rng):
    model = perturbed(arch, 11)
    assert model.param_count <= 2000
    batch = random_batch(rng, 2, 8)
    assert _fd_check(model, batch, TrainConfig(lam=0.5)) < 1e-4


def test_gradient_with_dropout_masks(rng):
    model = perturbed(TINY, 12)
    batch = random_batch(rng, 2, 8)
    assert _fd_check(model, batch, TrainConfig(lam=0.1), drop_seed=9) < 1e-4


def test_gradient_linear_in_lambda(rng):
    m = perturbed(TINY, 5)
    batch = random_batch(rng, 2)
    g0, _ = gradients(m, batch, TrainConfig(lam=0.0))
    g1, _ = gradients(m, batch, TrainConfig(lam=0.2))
    g2, _ = gradients(m, batch, TrainConfig(lam=0.4))
    scale = np.max(np.abs(g2))
    assert np.max(np.abs((g2 - g1) - (g1 - g0))) <= 1e-10 * scale


def test_zero_loss_head_bias_gradient():
    m = perturbed(TINY, 6)
    m.named()["head.w"][...] = 0.0
    m.named()["head.b"][...] = 0.25
    flat = np.full((2, 8, 8), 0.25)
    rng = np.random.default_rng(1)
    batch = PairSet(rng.random((2, 8, 8)), flat, flat, flat, kappa=2.0)
    g, vals = gradients(m, batch, TrainConfig(lam=0.0))
    assert vals["total"] == 0.0
    assert m.named(g)["head.b"][0] == 0.0


def test_non_finite_activation_names_layer(rng):
    m = perturbed(TINY, 1)
    m.named()["enc0.l1.w"][0, 0, 1, 1] = np.inf
    with pytest.raises(NonFiniteActivation, match="enc0.l1"):
        gradients(m, random_batch(rng), TrainConfig())


# --- checkpoint ------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = perturbed(replace(TINY, concat_mode=ConcatMode.PixelLevel), 3)
    m = SurrogateModel(m.arch, m.params, Normalization(25.0, 95.0))
    data = to_bytes(m)
    back = from_bytes(data)
    assert to_bytes(back) == data
    assert back.arch == m.arch and back.norm == m.norm
    assert np.array_equal(back.params, m.params)
    save(m, tmp_path / "m.thmw")
    assert (tmp_path / "m.thmw").read_bytes() == data
    assert load(tmp_path / "m.thmw").param_count == m.param_count
    assert data[:4] == b"THMW"


def test_checkpoint_rejects_corruption():
    data = to_bytes(init_model(TINY))
    with pytest.raises(CheckpointError):
        from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        from_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        from_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])


# --- training --------------------------------------------------------------------

def stationary_set(n=96, size=8, seed=0):
    r = np.random.default_rng(seed)
    x = np.linspace(0.0, 1.0, size)
    levels = r.uniform(0.05, 0.95, size=n)
    maps = np.stack([lv + 0.03 * np.sin(2 * np.pi * (r.random() + x))[None, :] * np.ones((size, 1))
                     for lv in levels])
    return PairSet(maps, maps, maps, maps, kappa=0.5)


SMALL = ArchConfig(base_channels=4, depth=2, dilation_rates=(1, 2), pos_dim=4, dropout_rate=0.0)


def test_training_deterministic():
    data = stationary_set(32)
    cfg = TrainConfig(lam=0.1, max_steps=12, epochs=10, batch=8)
    m1, h1 = train(data, SMALL, cfg, data)
    m2, h2 = train(data, SMALL, cfg, data)
    assert np.array_equal(m1.params, m2.params)
    assert len(h1) == len(h2)
    for a, b in zip(h1, h2):
        for k in a:
            assert a[k] == pytest.approx(b[k], abs=1e-12)
    assert {"train_total", "train_l_rmse", "train_l_physics", "val_total", "val_l_rmse",
            "val_l_physics", "lr", "epoch", "steps"} <= set(h1[0])


def test_training_lr_decay_and_early_stop():
    data = stationary_set(16)
    cfg = TrainConfig(lam=0.0, epochs=45, batch=16, lr_decay_every=20, early_stop_patience=1000)
    _, hist = train(data, SMALL, cfg, data)
    assert hist[0]["lr"] == cfg.lr
    assert hist[20]["lr"] == pytest.approx(cfg.lr * 0.9)
    assert hist[40]["lr"] == pytest.approx(cfg.lr * 0.81)
    # a vanishing step leaves validation flat, so patience runs out
    cfg = replace(cfg, lr=1e-300, early_stop_patience=2, epochs=50)
    _, hist = train(data, SMALL, cfg, data)
    assert len(hist) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_keeps_best_model():
    data = stationary_set(32)
    cfg = TrainConfig(lam=0.0, lr=1e100, epochs=20, batch=8)
    with pytest.raises(TrainingDiverged) as info:
        train(data, SMALL, cfg, data)
    assert np.all(np.isfinite(info.value.model.params))


def test_train_config_validation():
    for bad in ({"lam": -0.1}, {"lr": 0.0}, {"batch": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    preset = TrainConfig.full_scale_preset()
    assert (preset.lr, preset.batch, preset.epochs, preset.beta2) == (1e-6, 50, 100, 0.999)
    with pytest.raises(ValueError):
        train(stationary_set(4).take(slice(0, 0)), SMALL, TrainConfig())


# --- rollout ---------------------------------------------------------------------

def test_rollout_single_step_equals_forward(rng):
    m = perturbed(TINY, 8)
    spec = GridSpec(8, 8)
    I0, E, E2 = (ScalarField(spec, FieldKind.TemperatureC, 25 + 20 * rng.random((8, 8))) for _ in range(3))
    seq = rollout(m, I0, (E, E2), 1, 1e-3)
    assert len(seq) == 2 and seq.dt == 1e-3
    assert seq.frames[0] == I0
    assert seq.frames[1] == forward(m, I0, (E, E2))
    assert len(rollout(m, I0, (E, E2), 5)) == 6
    with pytest.raises(ValueError):
        rollout(m, I0, (E, E2), 0)


def test_rollout_pixel_level_matches_forward(rng):
    m = perturbed(replace(TINY, concat_mode=ConcatMode.PixelLevel), 8)
    spec = GridSpec(8, 8)
    I0, E, E2 = (ScalarField(spec, FieldKind.TemperatureC, 25 + 20 * rng.random((8, 8))) for _ in range(3))
    assert rollout(m, I0, (E, E2), 1).frames[1] == forward(m, I0, (E, E2))


def test_rollout_non_finite_reports_step(rng):
    m = perturbed(TINY, 8)
    m.named()["head.b"][...] = np.nan
    I0 = ScalarField.constant(GridSpec(8, 8), 30.0)
    with pytest.raises(RolloutError) as info:
        rollout(m, I0, (I0, I0), 3)
    assert info.value.step == 1


def test_identity_model_rollout_is_stationary():
    data = stationary_set()
    m, _ = train(data, SMALL, TrainConfig(lam=0.0, max_steps=600, epochs=1000, noise_sigma=0.0))
    spec = GridSpec(8, 8)
    start = ScalarField(spec, FieldKind.TemperatureC, m.norm.inverse(data.query[3]))
    arr = rollout(m, start, (start, start), 100).array()
    drift = np.abs(arr - arr[0]).max(axis=(1, 2))
    assert np.all(np.isfinite(arr))
    assert drift.max() < 0.05 * m.norm.span


def test_edge_padding_matches_numpy(rng):
    for shape in ((2, 3, 4, 4), (1, 1, 2, 5)):
        x = rng.random(shape)
        for t, b, l, r in ((1, 1, 1, 1), (4, 4, 4, 4), (0, 1, 0, 1), (3, 0, 2, 5)):
            ref = np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)), mode="edge")
            assert np.array_equal(pad_edge(x, t, b, l, r), ref)
