"""Patch VAE: locality, latent types, loss identities, training, calibration."""

import json

import numpy as np
import pytest
from conftest import param_slice_gradcheck

import voxdiff.autoencoder as ae
from voxdiff.autoencoder import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    AutoencoderConfig,
    AutoencoderParams,
    GaussianLatentField,
    LatentGrid,
    TrainingConfig,
    ae_loss,
    compute_scale_factor,
    decode,
    encode,
    load_autoencoder,
    reparameterize,
    save_autoencoder,
    train_autoencoder,
)
from voxdiff.dataset import build_shape, sample_shape_params
from voxdiff.geometry import TsdfGrid, default_origin
from voxdiff.nn import exp, tensor


def tiny_config(**kw):
    base = dict(resolution=8, patch_size=2, latent_channels=3,
                enc_width=12, dec_width=12)
    base.update(kw)
    return AutoencoderConfig(**base)


def random_tsdf(config, seed=0):
    rng = np.random.default_rng(seed)
    d, tau = config.resolution, config.tau_trunc
    values = rng.uniform(-tau, tau, size=(d, d, d)).astype(np.float32)
    return TsdfGrid(values, tau, 1.0 / d, default_origin(d))


@pytest.fixture(scope="module")
def furniture16():
    """Twelve small furniture TSDFs (four per category) at resolution 16."""
    shapes = []
    streams = np.random.SeedSequence(77).spawn(12)
    for i, category in enumerate(["chair", "table", "stool"] * 4):
        params = sample_shape_params(category, np.random.default_rng(streams[i]))
        shapes.append(build_shape(params, 16))
    return shapes


@pytest.fixture(scope="module")
def trained16(furniture16):
    config = AutoencoderConfig(resolution=16, patch_size=4, latent_channels=4,
                               enc_width=32, dec_width=32)
    params, log = train_autoencoder(
        furniture16, config,
        TrainingConfig(epochs=350, batch_size=4, learning_rate=2e-3, seed=0))
    return config, params, log


class TestConfig:
    def test_defaults(self):
        c = AutoencoderConfig()
        assert c.latent_side == 8
        assert c.tau_trunc == pytest.approx(3.0 / 32)

    def test_patch_must_divide_resolution(self):
        with pytest.raises(ValueError, match="divide"):
            AutoencoderConfig(resolution=32, patch_size=5)

    def test_patch_must_be_power_of_two(self):
        with pytest.raises(ValueError, match="power of two"):
            AutoencoderConfig(resolution=36, patch_size=6)
        with pytest.raises(ValueError, match="power of two"):
            AutoencoderConfig(resolution=32, patch_size=1)

    def test_rejects_bad_scalars(self):
        with pytest.raises(ValueError, match="kl_weight"):
            tiny_config(kl_weight=-1e-4)
        with pytest.raises(ValueError, match="enc_width"):
            tiny_config(enc_width=0)
        with pytest.raises(ValueError, match="tau_trunc"):
            tiny_config(tau_trunc=-0.1)

    def test_explicit_truncation_kept(self):
        assert tiny_config(tau_trunc=0.25).tau_trunc == 0.25

    def test_dict_round_trip(self):
        c = tiny_config()
        assert AutoencoderConfig.from_dict(c.to_dict()) == c

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            AutoencoderConfig.from_dict({"resolution": 8, "patches": 2})


class TestLatentTypes:
    def test_logvar_clamped_on_construction(self):
        f = GaussianLatentField(np.zeros((2, 2, 2, 2)),
                                np.full((2, 2, 2, 2), 1e4))
        assert f.log_variance.max() == LOGVAR_MAX
        g = GaussianLatentField(np.zeros((2, 2, 2, 2)),
                                np.full((2, 2, 2, 2), -1e4))
        assert g.log_variance.min() == LOGVAR_MIN

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            GaussianLatentField(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 3)))
        with pytest.raises(ValueError, match="shape"):
            GaussianLatentField(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))

    def test_non_finite_rejected(self):
        bad = np.zeros((1, 2, 2, 2))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            GaussianLatentField(bad, np.zeros((1, 2, 2, 2)))
        with pytest.raises(ValueError, match="finite"):
            LatentGrid(bad)

    def test_latent_grid_scale_validated(self):
        with pytest.raises(ValueError, match="scale_factor"):
            LatentGrid(np.zeros((1, 2, 2, 2)), scale_factor=0.0)
        with pytest.raises(ValueError, match="scale_factor"):
            LatentGrid(np.zeros((1, 2, 2, 2)), scale_factor=-1.0)


class TestEncode:
    def test_latent_shape_example(self):
        config = AutoencoderConfig(resolution=32, patch_size=4,
                                   latent_channels=4, enc_width=8, dec_width=8)
        params = AutoencoderParams(config, np.random.default_rng(0))
        f = encode(random_tsdf(config), params)
        assert f.mean.shape == (4, 8, 8, 8)
        assert f.log_variance.shape == (4, 8, 8, 8)

    def test_patch_locality_bitexact(self):
        config = tiny_config()
        params = AutoencoderParams(config, np.random.default_rng(1))
        p = config.patch_size
        a = random_tsdf(config, seed=10)
        b_values = random_tsdf(config, seed=11).values.copy()
        b_values[:p, :p, :p] = a.values[:p, :p, :p]
        fa, fb = encode(a, params), encode(b_values, params)
        # shared input patch -> identical Gaussian at that latent cell, bitwise
        np.testing.assert_array_equal(fa.mean[:, 0, 0, 0], fb.mean[:, 0, 0, 0])
        np.testing.assert_array_equal(fa.log_variance[:, 0, 0, 0],
                                      fb.log_variance[:, 0, 0, 0])
        assert not np.array_equal(fa.mean[:, 1, 0, 0], fb.mean[:, 1, 0, 0])

    def test_single_patch_edit_moves_single_cell(self):
        config = tiny_config()
        params = AutoencoderParams(config, np.random.default_rng(2))
        p, g = config.patch_size, config.latent_side
        base = random_tsdf(config, seed=3)
        edited = base.values.copy()
        edited[2 * p:3 * p, p:2 * p, 0:p] += 0.01
        fa, fb = encode(base, params), encode(edited, params)
        diff = np.any(fa.mean != fb.mean, axis=0)
        expected = np.zeros((g, g, g), dtype=bool)
        expected[2, 1, 0] = True
        np.testing.assert_array_equal(diff, expected)

    def test_wrong_resolution_rejected(self):
        params = AutoencoderParams(tiny_config(), np.random.default_rng(0))
        with pytest.raises(ValueError, match="resolution"):
            encode(np.zeros((4, 4, 4), dtype=np.float32), params)

    def test_logvar_head_is_clipped(self):
        config = tiny_config()
        params = AutoencoderParams(config, np.random.default_rng(0))
        state = params.state_dict()
        state["encoder.logvar_head.bias"] = np.full_like(
            state["encoder.logvar_head.bias"], 1000.0)
        params.load_state_dict(state)
        f = encode(random_tsdf(config), params)
        assert np.all(f.log_variance == LOGVAR_MAX)
        state["encoder.logvar_head.bias"] = np.full_like(
            state["encoder.logvar_head.bias"], -1000.0)
        params.load_state_dict(state)
        f = encode(random_tsdf(config), params)
        assert np.all(f.log_variance == LOGVAR_MIN)


class TestReparameterize:
    def field(self, mean, logvar):
        shape = (2, 2, 2, 2)
        return GaussianLatentField(np.full(shape, mean), np.full(shape, logvar))

    def test_zero_noise_returns_scaled_mean(self):
        f = GaussianLatentField(np.random.default_rng(0).normal(size=(3, 4, 4, 4)),
                                np.zeros((3, 4, 4, 4)))
        z = reparameterize(f, np.zeros_like(f.mean), scale_factor=1.5)
        np.testing.assert_array_equal(z.values, f.mean * 1.5)
        assert z.scale_factor == 1.5

    def test_unit_variance_adds_noise_directly(self):
        f = self.field(0.0, 0.0)
        noise = np.random.default_rng(1).normal(size=f.mean.shape)
        z = reparameterize(f, noise)
        np.testing.assert_array_equal(z.values, noise)

    def test_half_std(self):
        f = self.field(0.0, 2.0 * np.log(0.5))
        noise = np.ones_like(f.mean)
        z = reparameterize(f, noise)
        np.testing.assert_allclose(z.values, 0.5, rtol=1e-12)

    def test_noise_shape_mismatch(self):
        with pytest.raises(ValueError, match="noise"):
            reparameterize(self.field(0.0, 0.0), np.zeros((2, 2, 2, 3)))


class TestDecode:
    def test_output_bounded_by_truncation(self):
        config = tiny_config()
        params = AutoencoderParams(config, np.random.default_rng(0))
        g = config.latent_side
        z = np.random.default_rng(5).normal(
            scale=3.0, size=(config.latent_channels, g, g, g))
        out = decode(LatentGrid(z), params)
        assert np.all(np.abs(out.values) <= config.tau_trunc)
        assert out.voxel_size == pytest.approx(1.0 / config.resolution)

    def test_zero_latent_finite_and_deterministic(self):
        config = tiny_config()
        params = AutoencoderParams(config, np.random.default_rng(0))
        g = config.latent_side
        z = np.zeros((config.latent_channels, g, g, g))
        a, b = decode(LatentGrid(z), params), decode(LatentGrid(z), params)
        assert np.isfinite(a.values).all()
        np.testing.assert_array_equal(a.values, b.values)

    def test_scale_factor_divided_out(self):
        config = tiny_config()
        params = AutoencoderParams(config, np.random.default_rng(0))
        g = config.latent_side
        z = np.random.default_rng(6).normal(
            size=(config.latent_channels, g, g, g))
        plain = decode(LatentGrid(z, 1.0), params)
        scaled = decode(LatentGrid(z * 2.0, 2.0), params)
        np.testing.assert_array_equal(plain.values, scaled.values)

    def test_bare_array_accepted(self):
        config = tiny_config()
        params = AutoencoderParams(config, np.random.default_rng(0))
        g = config.latent_side
        z = np.zeros((config.latent_channels, g, g, g))
        np.testing.assert_array_equal(decode(z, params).values,
                                      decode(LatentGrid(z), params).values)

    def test_latent_shape_mismatch(self):
        params = AutoencoderParams(tiny_config(), np.random.default_rng(0))
        with pytest.raises(ValueError, match="latent"):
            decode(np.zeros((2, 4, 4, 4)), params)


class TestLoss:
    def test_perfect_reconstruction_and_standard_prior(self):
        g = random_tsdf(tiny_config())
        zeros = np.zeros((3, 4, 4, 4))
        total, recon, kl = ae_loss(g, g.values, (zeros, zeros), 1e-4)
        assert float(total.data) == 0.0
        assert float(recon.data) == 0.0
        assert float(kl.data) == 0.0

    def test_kl_of_unit_mean_is_half(self):
        ones = np.ones((3, 4, 4, 4))
        zeros = np.zeros((3, 4, 4, 4))
        _, _, kl = ae_loss(zeros[:1], zeros[:1], (ones, zeros), 1.0)
        assert float(kl.data) == pytest.approx(0.5, rel=1e-12)

    def test_recon_term_is_mean_absolute_error(self):
        target = np.zeros((4, 4, 4))
        recon = np.full((4, 4, 4), 0.25)
        total, rec, kl = ae_loss(target, recon, (target[None], target[None]), 1.0)
        assert float(rec.data) == pytest.approx(0.25, rel=1e-12)
        assert float(kl.data) == 0.0
        assert float(total.data) == pytest.approx(0.25, rel=1e-12)

    def test_total_composition(self):
        rng = np.random.default_rng(7)
        target = rng.normal(size=(4, 4, 4))
        recon = rng.normal(size=(4, 4, 4))
        mean, logvar = rng.normal(size=(2, 2, 2, 2)), rng.normal(size=(2, 2, 2, 2))
        lam = 0.37
        total, rec, kl = ae_loss(target, recon, (mean, logvar), lam)
        assert float(total.data) == pytest.approx(
            float(rec.data) + lam * float(kl.data), rel=1e-12)

    def test_kl_never_negative(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            mean = rng.normal(scale=rng.uniform(0.1, 5), size=(2, 3, 3, 3))
            logvar = rng.normal(scale=rng.uniform(0.1, 5), size=(2, 3, 3, 3))
            _, _, kl = ae_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)),
                               (mean, logvar), 1.0)
            assert float(kl.data) >= 0.0

    def test_accepts_gaussian_field(self):
        f = GaussianLatentField(np.ones((2, 2, 2, 2)), np.zeros((2, 2, 2, 2)))
        _, _, kl = ae_loss(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), f, 1.0)
        assert float(kl.data) == pytest.approx(0.5, rel=1e-12)

    def test_shape_mismatch(self):
        zeros = np.zeros((2, 2, 2, 2))
        with pytest.raises(ValueError, match="mismatch"):
            ae_loss(np.zeros((4, 4, 4)), np.zeros((5, 5, 5)), (zeros, zeros), 1.0)


class TestGradients:
    def test_full_pipeline_gradcheck(self):
        config = tiny_config()
        rng = np.random.default_rng(0)
        params = AutoencoderParams(config, rng, dtype=np.float64)
        d = config.resolution
        target = np.random.default_rng(1).uniform(
            -config.tau_trunc, config.tau_trunc, size=(2, d, d, d))
        x = tensor(target[..., None])
        noise = np.random.default_rng(2).standard_normal(
            (2, 4, 4, 4, config.latent_channels))

        def make_loss():
            mean, logvar = params.encoder(x)
            z = mean + exp(logvar * 0.5) * tensor(noise)
            recon = params.decoder(z)
            total, _, _ = ae_loss(x, recon, (mean, logvar), config.kl_weight)
            return total

        worst = param_slice_gradcheck(params, make_loss,
                                      np.random.default_rng(3), n_entries=16)
        assert worst < 1e-4


class TestTraining:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train_autoencoder([], tiny_config(), TrainingConfig(epochs=1))

    def test_wrong_grid_shape_rejected(self):
        data = np.zeros((2, 4, 4, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="shape"):
            train_autoencoder(data, tiny_config(), TrainingConfig(epochs=1))

    def test_deterministic_given_seed(self):
        config = tiny_config()
        data = [random_tsdf(config, seed=s) for s in range(6)]
        cfg = TrainingConfig(epochs=2, batch_size=3, seed=4)
        _, log_a = train_autoencoder(data, config, cfg)
        _, log_b = train_autoencoder(data, config, cfg)
        assert log_a == log_b

    def test_manifest_input_matches_array_input(self, tmp_path):
        # train_autoencoder and compute_scale_factor accept a dataset
        # manifest directly, equivalent to passing its stacked grids
        from voxdiff.dataset import build_procedural_dataset
        man = build_procedural_dataset(4, ("chair",), 8, 3, tmp_path)
        config = tiny_config()
        cfg = TrainingConfig(epochs=1, batch_size=2, seed=0)
        params_m, log_m = train_autoencoder(man, config, cfg)
        params_a, log_a = train_autoencoder(man.load_all(), config, cfg)
        assert log_m == log_a
        assert compute_scale_factor(man, params_m) == pytest.approx(
            compute_scale_factor(man.load_all(), params_a))

    def test_seed_changes_trajectory(self):
        config = tiny_config()
        data = [random_tsdf(config, seed=s) for s in range(6)]
        _, log_a = train_autoencoder(
            data, config, TrainingConfig(epochs=1, batch_size=3, seed=0))
        _, log_b = train_autoencoder(
            data, config, TrainingConfig(epochs=1, batch_size=3, seed=1))
        assert log_a["total"] != log_b["total"]

    def test_divergence_aborts_with_diagnostic(self):
        config = tiny_config()
        data = [random_tsdf(config, seed=s) for s in range(4)]
        with pytest.raises(RuntimeError, match="non-finite"):
            train_autoencoder(data, config,
                              TrainingConfig(epochs=5, batch_size=4,
                                             learning_rate=1e8, seed=0))

    def test_reconstruction_improves(self, trained16):
        _, _, log = trained16
        assert log["recon"][-1] < 0.3 * log["recon"][0]

    def test_trained_roundtrip_mae_within_band(self, trained16, furniture16):
        config, params, _ = trained16
        maes = []
        for g in furniture16:
            f = encode(g, params)
            rec = decode(LatentGrid(f.mean), params)
            band = np.abs(g.values) < g.tau_trunc
            maes.append(np.abs(rec.values - g.values)[band].mean())
        assert np.mean(maes) < 0.25 * (1.0 / config.resolution)

    def test_kl_weight_zero_reconstructs_no_worse(self):
        config = tiny_config(kl_weight=1e-4)
        free = tiny_config(kl_weight=0.0)
        data = [random_tsdf(config, seed=s) for s in range(8)]
        cfg = TrainingConfig(epochs=10, batch_size=4, seed=0)
        _, log_reg = train_autoencoder(data, config, cfg)
        _, log_free = train_autoencoder(data, free, cfg)
        assert log_free["recon"][-1] <= log_reg["recon"][-1] + 1e-6


class TestCalibration:
    def make_dataset(self, n, d=8):
        return np.zeros((n, d, d, d), dtype=np.float32) + \
            np.arange(n, dtype=np.float32)[:, None, None, None] * 0.0

    def patch_encode(self, monkeypatch, fields):
        it = iter(fields)
        calls = []

        def fake_encode(values, params):
            calls.append(1)
            return next(it)

        monkeypatch.setattr(ae, "encode", fake_encode)
        return calls

    def test_unit_variance_gives_unit_factor(self, monkeypatch):
        rng = np.random.default_rng(0)
        shape = (3, 4, 4, 4)
        fields = [GaussianLatentField(rng.standard_normal(shape),
                                      np.full(shape, LOGVAR_MIN))
                  for _ in range(400)]
        self.patch_encode(monkeypatch, fields)
        params = AutoencoderParams(tiny_config(), np.random.default_rng(0))
        factor = compute_scale_factor(self.make_dataset(400), params,
                                      max_shapes=400)
        assert factor == pytest.approx(1.0, abs=0.05)

    def test_double_std_halves_factor(self, monkeypatch):
        rng = np.random.default_rng(1)
        shape = (3, 4, 4, 4)
        fields = [GaussianLatentField(2.0 * rng.standard_normal(shape),
                                      np.full(shape, LOGVAR_MIN))
                  for _ in range(400)]
        self.patch_encode(monkeypatch, fields)
        params = AutoencoderParams(tiny_config(), np.random.default_rng(0))
        factor = compute_scale_factor(self.make_dataset(400), params,
                                      max_shapes=400)
        assert factor == pytest.approx(0.5, abs=0.03)

    def test_encoded_variance_counts(self, monkeypatch):
        # identical means everywhere: all spread lives in the per-cell variance
        shape = (2, 2, 2, 2)
        fields = [GaussianLatentField(np.zeros(shape), np.zeros(shape))
                  for _ in range(16)]
        self.patch_encode(monkeypatch, fields)
        params = AutoencoderParams(tiny_config(), np.random.default_rng(0))
        factor = compute_scale_factor(self.make_dataset(16), params)
        assert factor == pytest.approx(1.0, rel=1e-6)

    def test_exact_two_shape_pooling(self, monkeypatch):
        # means 0 and 2 (population variance 1) plus variance 3 -> pooled 4
        shape = (1, 1, 1, 1)
        fields = [GaussianLatentField(np.full(shape, 0.0), np.full(shape, np.log(3.0))),
                  GaussianLatentField(np.full(shape, 2.0), np.full(shape, np.log(3.0)))]
        self.patch_encode(monkeypatch, fields)
        params = AutoencoderParams(tiny_config(), np.random.default_rng(0))
        factor = compute_scale_factor(self.make_dataset(2), params)
        assert factor == pytest.approx(0.5, rel=1e-9)

    def test_max_shapes_caps_work(self, monkeypatch):
        shape = (1, 2, 2, 2)
        fields = [GaussianLatentField(np.zeros(shape), np.zeros(shape))
                  for _ in range(4)]
        calls = self.patch_encode(monkeypatch, fields)
        params = AutoencoderParams(tiny_config(), np.random.default_rng(0))
        compute_scale_factor(self.make_dataset(10), params, max_shapes=4)
        assert len(calls) == 4

    def test_real_encoder_factor_normalizes(self, trained16, furniture16):
        _, params, _ = trained16
        factor = compute_scale_factor(furniture16, params)
        assert np.isfinite(factor) and factor > 0
        # applying the factor brings the pooled latent std to one
        scaled = []
        for g in furniture16:
            f = encode(g, params)
            scaled.append(f.mean * factor)
        var_means = np.stack(scaled).var(axis=0)
        var_enc = np.mean([np.exp(encode(g, params).log_variance) * factor ** 2
                           for g in furniture16], axis=0)
        assert float((var_means + var_enc).mean()) == pytest.approx(1.0, rel=1e-4)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        config = tiny_config()
        params = AutoencoderParams(config, np.random.default_rng(9))
        params.scale_factor = 0.8
        curve = {"epochs": [1], "total": [0.5], "recon": [0.4], "kl": [0.1]}
        save_autoencoder(tmp_path, params, seed=3, epoch=7, loss_curve=curve)
        loaded, manifest = load_autoencoder(tmp_path)
        assert loaded.config == config
        assert loaded.scale_factor == 0.8
        assert manifest["seed"] == 3 and manifest["epoch"] == 7
        assert manifest["loss_curve"] == curve
        for key, value in params.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[key], value)

    def test_kind_mismatch_rejected(self, tmp_path):
        config = tiny_config()
        save_autoencoder(tmp_path, AutoencoderParams(config))
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["kind"] = "diffusion"
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="autoencoder"):
            load_autoencoder(tmp_path)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_autoencoder(tmp_path / "nowhere")
