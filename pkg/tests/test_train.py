import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatial_vae import objective
from spatial_vae.data import ImageDataset
from spatial_vae.model import Posterior, build_model, decode_image, encoder_forward, reparameterize
from spatial_vae.objective import elbo
from spatial_vae import diffcore as dc
from spatial_vae.train import (CHECKPOINT_VERSION, CheckpointError, TrainConfig,
                               TrainingDivergedError, batch_objective, fit, gradient_check,
                               init_state, load_checkpoint, rotation_augment, save_checkpoint,
                               train_step)


def tiny_config(**kw):
    base = dict(z_dim=2, epochs=3, batch_size=5, lr=1e-3, hidden=(8, 8), seed=3)
    base.update(kw)
    return TrainConfig(**base)


def random_dataset(n=12, h=6, w=6, pixel_model="binary", seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.random((n, h, w)) if pixel_model == "binary" else rng.standard_normal((n, h, w))
    return ImageDataset(imgs, pixel_model)


def frozen_noise(cfg, model, n, epoch=0, batch=0):
    # reproduces the keyed noise stream used inside a training step
    return np.random.default_rng([cfg.seed, 1, epoch, batch]).standard_normal(
        (n, model.encoder.n_latent))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(lr=-1e-4),
    dict(lr=float("nan")),
    dict(freeze_z_epochs=5, epochs=3),
    dict(freeze_z_epochs=-1),
    dict(augment_rotation=True, rotation=False),
    dict(generator="vanilla"),
    dict(theta_prior="flat"),
    dict(s_theta=0.0),
])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        tiny_config(**kw)


def test_config_dict_round_trip():
    cfg = tiny_config(encoder_hidden=(5,), theta_prior="uniform", freeze_z_epochs=2)
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({**cfg.to_dict(), "momentum": 0.9})


# ---------------------------------------------------------------------------
# train_step
# ---------------------------------------------------------------------------

def test_zero_learning_rate_keeps_parameters():
    ds = random_dataset()
    cfg = tiny_config(lr=0.0)
    st0 = init_state(ds, cfg)
    model, opt, br = train_step(ds.images[:5], st0.model, st0.opt, cfg, epoch=0)
    for a, b in zip(model.parameters(), st0.model.parameters()):
        np.testing.assert_array_equal(a, b)
    assert math.isfinite(br.elbo) and br.elbo < 0
    assert opt.step == 1


def test_single_step_descends_with_frozen_noise():
    ds = random_dataset(n=1)
    cfg = tiny_config(lr=1e-4, batch_size=1)
    st0 = init_state(ds, cfg)
    noise = frozen_noise(cfg, st0.model, 1)
    before = batch_objective(st0.model, ds.images, cfg, 0, noise).mean()
    model, _, reported = train_step(ds.images, st0.model, st0.opt, cfg, epoch=0)
    after = batch_objective(model, ds.images, cfg, 0, noise).mean()
    assert reported.elbo == before.elbo
    assert -after.elbo < -before.elbo


def test_freeze_decodes_pose_only(monkeypatch):
    # without pose inference every input has the same inferred pose (zero),
    # so during the freeze every image decodes to the same prediction
    ds = random_dataset(n=4)
    cfg = tiny_config(rotation=False, translation=False, freeze_z_epochs=2)
    model = init_state(ds, cfg).model
    seen = []
    real_decode = objective.decode_image

    def spy(sample, grid, params, weights=None):
        out = real_decode(sample, grid, params, weights)
        seen.append(out.mean.data.copy())
        return out

    monkeypatch.setattr(objective, "decode_image", spy)
    noise = frozen_noise(cfg, model, 4)
    frozen = batch_objective(model, ds.images, cfg, 0, noise)
    decoded = seen[-1]
    for row in decoded[1:]:
        np.testing.assert_array_equal(row, decoded[0])
    np.testing.assert_array_equal(frozen.kl_z.data, 0.0)
    thawed = batch_objective(model, ds.images, cfg, 2, noise)
    assert np.all(thawed.kl_z.data > 0)
    assert not np.array_equal(seen[-1][0], seen[-1][1])


def test_freeze_keeps_pose_inference():
    ds = random_dataset(n=3)
    cfg = tiny_config(freeze_z_epochs=1)
    model = init_state(ds, cfg).model
    noise = frozen_noise(cfg, model, 3)
    br = batch_objective(model, ds.images, cfg, 0, noise)
    np.testing.assert_array_equal(br.kl_z.data, 0.0)
    assert np.all(br.kl_theta.data > 0) and np.all(br.kl_dx.data > 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_step_raises():
    ds = random_dataset(n=2)
    cfg = tiny_config()
    st0 = init_state(ds, cfg)
    bad = ds.images.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(TrainingDivergedError, match="epoch 0"):
        train_step(bad, st0.model, st0.opt, cfg, epoch=0)


# ---------------------------------------------------------------------------
# rotation augmentation
# ---------------------------------------------------------------------------

def test_augment_is_deterministic_and_in_range():
    imgs = random_dataset(n=6).images
    a, ga = rotation_augment(imgs, np.random.default_rng(5))
    b, gb = rotation_augment(imgs, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ga, gb)
    assert np.all((ga >= 0) & (ga < 2 * math.pi))


def test_zero_gamma_equals_no_augmentation():
    ds = random_dataset(n=4)
    cfg = tiny_config(theta_prior="uniform")
    model = init_state(ds, cfg).model
    noise = frozen_noise(cfg, model, 4)
    plain = batch_objective(model, ds.images, cfg, 0, noise)
    aug = batch_objective(model, ds.images, cfg, 0, noise, gammas=np.zeros(4))
    for f in plain.FIELDS:
        np.testing.assert_array_equal(getattr(aug, f).data, getattr(plain, f).data)


def _equivariant_encoder(image, params, weights=None):
    """Encoder that is exactly equivariant to quarter turns.

    The network sees a canonical orientation of the input (the lexicographically
    largest of its four quarter turns) and the number of turns back to it is added
    to the rotation mean, so turning the input by ``k pi/2`` adds ``k pi/2``.
    """
    data = np.asarray(image.data if isinstance(image, dc.Tensor) else image)
    side = int(round(math.sqrt(data.shape[-1])))
    canon, turns = [], []
    for x in data.reshape(-1, side, side):
        key = np.round(x, 9)
        cands = [tuple(np.rot90(key, j).ravel()) for j in range(4)]
        j = max(range(4), key=lambda i: cands[i])
        canon.append(np.rot90(key, j))
        turns.append(j)
    post = encoder_forward(np.stack(canon).reshape(len(data), -1), params, weights)
    post.mu_theta = dc.add(post.mu_theta, np.array(turns) * (math.pi / 2))
    return post


def test_augmentation_is_identity_for_rotation_faithful_model(monkeypatch):
    ds = random_dataset(n=6, h=7, w=7, seed=11)
    cfg = tiny_config(theta_prior="uniform", s_theta=math.pi, augment_rotation=True)
    model = init_state(ds, cfg).model
    monkeypatch.setattr(objective, "encoder_forward", _equivariant_encoder)
    noise = frozen_noise(cfg, model, 6)
    gammas = np.array([0, 1, 2, 3, 1, 2]) * (math.pi / 2)
    plain = batch_objective(model, ds.images, cfg, 0, noise)
    aug = batch_objective(model, ds.images, cfg, 0, noise, gammas=gammas)
    for f in plain.FIELDS:
        np.testing.assert_allclose(getattr(aug, f).data, getattr(plain, f).data,
                                   rtol=1e-9, atol=1e-9)


def test_augmentation_consumes_its_own_stream():
    ds = random_dataset(n=5)
    cfg = tiny_config(augment_rotation=True)
    st0 = init_state(ds, cfg)
    a = train_step(ds.images, st0.model, st0.opt, cfg, epoch=0)
    b = train_step(ds.images, st0.model, st0.opt, cfg, epoch=0)
    c = train_step(ds.images, st0.model, st0.opt, tiny_config(), epoch=0)
    assert a[2] == b[2]
    assert a[2].elbo != c[2].elbo


# ---------------------------------------------------------------------------
# ablation shares the code path
# ---------------------------------------------------------------------------

def test_zero_pose_posterior_matches_pose_free_reconstruction():
    rng = np.random.default_rng(2)
    model = build_model(6, 6, 2, hidden=(8, 8), rotation=False, translation=False, seed=4)
    y = rng.random((5, 36))
    mu_z, sigma_z = rng.standard_normal((5, 2)), np.exp(rng.standard_normal((5, 2)))
    tiny = 1e-300
    full = Posterior(dc.Tensor(mu_z), dc.Tensor(sigma_z),
                     dc.Tensor(np.zeros(5)), dc.Tensor(np.full(5, tiny)),
                     dc.Tensor(np.zeros((5, 2))), dc.Tensor(np.full((5, 2), tiny)))
    bare = Posterior(dc.Tensor(mu_z), dc.Tensor(sigma_z))
    eps = rng.standard_normal((5, 5))
    priors = TrainConfig().priors
    out = []
    for post, flags, noise in ((full, True, eps), (bare, False, eps[:, :2])):
        s = reparameterize(post, noise)
        dec = decode_image(s, model.grid, model.generator)
        out.append(elbo(y, post, dec, priors, flags, flags, 1.0))
    np.testing.assert_array_equal(out[0].recon_loglik.data, out[1].recon_loglik.data)
    np.testing.assert_array_equal(out[0].kl_z.data, out[1].kl_z.data)
    np.testing.assert_array_equal(out[1].kl_theta.data, 0.0)
    np.testing.assert_array_equal(out[1].kl_dx.data, 0.0)


# ---------------------------------------------------------------------------
# fit, determinism, resume
# ---------------------------------------------------------------------------

def _params_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.model.parameters(), b.model.parameters()))


def test_fit_history_and_determinism():
    ds, te = random_dataset(n=12), random_dataset(n=4, seed=9)
    cfg = tiny_config(eval_every=2)
    a = fit(ds, cfg, te)
    b = fit(ds, cfg, te)
    assert _params_equal(a, b) and a.history == b.history
    assert [r["epoch"] for r in a.history] == [1, 2, 3]
    assert "test_elbo" in a.history[1] and "test_elbo" not in a.history[0]
    assert a.opt.step == 3 * 3                       # 12 images in batches of 5
    c = fit(ds, tiny_config(seed=4, eval_every=2), te)
    assert not _params_equal(a, c)


def test_fit_rejects_geometry_mismatch():
    st0 = init_state(random_dataset(h=6, w=6), tiny_config())
    with pytest.raises(ValueError, match="geometry"):
        fit(random_dataset(h=5, w=5), tiny_config(), state=st0)


def test_resume_is_bit_exact(tmp_path):
    ds, te = random_dataset(n=10), random_dataset(n=3, seed=9)
    cfg = tiny_config(epochs=4, augment_rotation=True, freeze_z_epochs=1)
    whole = fit(ds, cfg, te)
    ck = tmp_path / "ck"
    fit(ds, cfg, te, checkpoint_dir=str(ck), stop_after=2)
    part = load_checkpoint(str(ck))
    assert part.epoch == 2 and len(part.history) == 2
    done = fit(ds, part.config, te, state=part)
    assert done.history == whole.history
    assert _params_equal(done, whole)
    for m1, m2 in zip(done.opt.m + done.opt.v, whole.opt.m + whole.opt.v):
        np.testing.assert_array_equal(m1, m2)


def test_checkpoint_every(tmp_path):
    ds = random_dataset(n=5)
    fit(ds, tiny_config(epochs=4), checkpoint_dir=str(tmp_path), checkpoint_every=3)
    # the last save wins; epoch 3 was written and then overwritten at epoch 4
    assert load_checkpoint(str(tmp_path)).epoch == 4


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

@pytest.fixture
def trained(tmp_path):
    ds = random_dataset(n=6)
    state = fit(ds, tiny_config(epochs=2, encoder_hidden=(7,)))
    save_checkpoint(str(tmp_path / "a"), state)
    return state, tmp_path


def _read_all(d):
    return {n: open(os.path.join(d, n), "rb").read() for n in sorted(os.listdir(d))}


def test_save_load_save_byte_identical(trained):
    state, tmp = trained
    again = load_checkpoint(str(tmp / "a"))
    save_checkpoint(str(tmp / "b"), again)
    a, b = _read_all(tmp / "a"), _read_all(tmp / "b")
    assert sorted(a) == ["adam.f64", "header.json", "params.f64"]
    assert a == b
    assert again.config == state.config and again.history == state.history
    assert _params_equal(again, state)


def test_checkpoint_layout(trained):
    state, tmp = trained
    flat = np.fromfile(tmp / "a" / "params.f64", dtype="<f8")
    expect = np.concatenate([p.ravel() for p in state.model.parameters()])
    np.testing.assert_array_equal(flat, expect)
    mom = np.fromfile(tmp / "a" / "adam.f64", dtype="<f8")
    np.testing.assert_array_equal(mom[:flat.size], np.concatenate([m.ravel() for m in state.opt.m]))
    np.testing.assert_array_equal(mom[flat.size:], np.concatenate([v.ravel() for v in state.opt.v]))


def test_truncated_file_fails_checksum(trained):
    _, tmp = trained
    path = tmp / "a" / "params.f64"
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(str(tmp / "a"))


def test_version_mismatch(trained):
    _, tmp = trained
    header = tmp / "a" / "header.json"
    text = header.read_text().replace(CHECKPOINT_VERSION, "spatial-vae-checkpoint/0")
    header.write_text(text)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(str(tmp / "a"))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="header"):
        load_checkpoint(str(tmp_path / "nowhere"))


# ---------------------------------------------------------------------------
# robustness
# ---------------------------------------------------------------------------

@settings(max_examples=8)
@given(seed=st.integers(0, 10_000),
       pixel_model=st.sampled_from(["binary", "real"]),
       generator=st.sampled_from(["spatial", "vanilla"]),
       scale=st.sampled_from([1.0, 10.0]))
def test_fifty_epoch_fuzz_stays_finite(seed, pixel_model, generator, scale):
    rng = np.random.default_rng(seed)
    if pixel_model == "binary":
        imgs = (rng.random((6, 4, 4)) < 0.5).astype(float)
    else:
        imgs = scale * rng.standard_normal((6, 4, 4))
    pose = generator == "spatial"
    cfg = TrainConfig(z_dim=2, epochs=50, batch_size=3, lr=1e-2, hidden=(6,), seed=seed,
                      generator=generator, rotation=pose, translation=pose)
    state = fit(ImageDataset(imgs, pixel_model), cfg)
    assert all(np.all(np.isfinite(p)) for p in state.model.parameters())
    assert all(math.isfinite(r["train_elbo"]) for r in state.history)


def test_gradient_check_small_models():
    assert gradient_check() <= 1e-4
    assert gradient_check(pixel_model="real", seed=1) <= 1e-4
    assert gradient_check(rotation=False, translation=False, hidden=(5,)) <= 1e-4
    with pytest.raises(ValueError):
        gradient_check(epsilon=0.0)
