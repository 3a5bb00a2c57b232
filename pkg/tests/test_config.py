"""Tests for the run configuration document."""

import numpy as np
import pytest

from voxdiff.config import ConfigError, RunConfig, default_config
from voxdiff.denoiser import UinUNetConfig


class TestDefaults:
    def test_desk_defaults_validate(self):
        cfg = RunConfig.from_dict({})
        assert cfg.resolution == 32
        assert cfg.patch_size == 4
        assert cfg.latent_side == 8
        assert cfg.autoencoder_config().latent_channels == 4

    def test_paper_preset(self):
        cfg = RunConfig.from_dict(default_config("paper"))
        assert cfg.resolution == 64
        assert cfg.patch_size == 8
        assert cfg.latent_side == 8
        assert cfg["denoiser"]["base_width"] == 64

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            default_config("datacenter")

    def test_partial_document_fills_defaults(self):
        cfg = RunConfig.from_dict({"geometry": {"resolution": 16, "patch_size": 2}})
        assert cfg.resolution == 16
        assert cfg["schedule"]["T"] == 1000
        assert cfg.latent_side == 8


class TestAccessors:
    def test_autoencoder_config(self):
        cfg = RunConfig.from_dict({"autoencoder": {"enc_width": 24, "kl_weight": 0.5}})
        ae = cfg.autoencoder_config()
        assert ae.enc_width == 24 and ae.dec_width == 32
        assert ae.kl_weight == 0.5
        assert ae.resolution == 32 and ae.patch_size == 4

    def test_denoiser_config_latent_geometry(self):
        cfg = RunConfig.from_dict({})
        dn = cfg.denoiser_config()
        assert isinstance(dn, UinUNetConfig)
        assert dn.latent_side == 8 and dn.in_channels == 4
        assert dn.inner_enabled and dn.inout_concat_enabled

    def test_plain_unet_variant(self):
        dn = RunConfig.from_dict({}).denoiser_config(plain_unet=True)
        assert not dn.inner_enabled
        assert not dn.inner_attention_enabled
        assert not dn.inout_concat_enabled
        assert dn.base_width == 32

    def test_sampler_settings_with_overrides(self):
        cfg = RunConfig.from_dict({"sampler": {"num_steps": 25}})
        st = cfg.sampler_settings()
        assert st.num_steps == 25 and st.guidance_scale == 3.0
        st2 = cfg.sampler_settings(guidance_scale=5.0)
        assert st2.guidance_scale == 5.0 and st2.num_steps == 25

    def test_training_configs(self):
        cfg = RunConfig.from_dict({"diffusion_training": {"epochs": 7},
                                   "conditioning": {"p_uncond": 0.25}})
        dt = cfg.diffusion_training_config()
        assert dt.epochs == 7 and dt.p_uncond == 0.25
        assert cfg.ae_training_config().epochs == 80

    def test_schedule_params(self):
        cfg = RunConfig.from_dict({"schedule": {"T": 100}})
        assert cfg.schedule_params() == {"T": 100, "beta_start": 1e-4,
                                         "beta_end": 0.02}

    def test_section_access_returns_copy(self):
        cfg = RunConfig.from_dict({})
        section = cfg["dataset"]
        section["n_shapes"] = 1
        assert cfg["dataset"]["n_shapes"] == 200


class TestDigest:
    def test_stable_and_sensitive(self):
        a = RunConfig.from_dict({})
        b = RunConfig.from_dict({"geometry": {"resolution": 32}})
        c = RunConfig.from_dict({"geometry": {"resolution": 16, "patch_size": 2}})
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()
        assert len(a.digest()) == 64
        assert set(a.digest()) <= set("0123456789abcdef")


class TestFileLoading:
    def test_from_file_round_trip(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[geometry]\nresolution = 16\npatch_size = 2\n"
                        "[autoencoder]\nenc_width = 12\n")
        cfg = RunConfig.from_file(path)
        assert cfg.resolution == 16
        assert cfg.autoencoder_config().enc_width == 12

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[sampler]\nnum_steps = 10\n")
        cfg = RunConfig.from_file(path, {"sampler": {"num_steps": 20}})
        assert cfg.sampler_settings().num_steps == 20

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.from_file(tmp_path / "none.toml")

    def test_malformed_toml(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[geometry\nresolution = 16\n")
        with pytest.raises(ConfigError, match="run.toml"):
            RunConfig.from_file(path)


ADVERSARIAL = [
    ({"geometry": {"resolution": 30}}, "must divide"),
    ({"geometry": {"resolution": 36, "patch_size": 6}}, "power of two"),
    ({"denoiser": {"depth": 5}}, "not divisible"),
    ({"denoiser": {"num_heads": 3}}, "num_heads"),
    ({"denoiser": {"cond_embed_dim": 30}}, "cond_embed_dim"),
    ({"denoiser": {"time_embed_dim": 63}}, "time_embed_dim"),
    ({"sampler": {"sampler": "ddpm", "num_steps": 50}}, "must equal schedule.T"),
    ({"sampler": {"num_steps": 2000}}, "exceeds schedule.T"),
    ({"schedule": {"beta_start": 0.5, "beta_end": 0.1}}, "beta_start"),
    ({"conditioning": {"p_uncond": 1.5}}, "p_uncond"),
    ({"sampler": {"eta": -0.5}}, "eta"),
    ({"dataset": {"categories": ["sofa"]}}, "unknown dataset categories"),
    ({"dataset": {"categories": []}}, "must not be empty"),
    ({"autoencoder": {"kl_weight": -1.0}}, "kl_weight"),
]


class TestCrossFieldValidation:
    @pytest.mark.parametrize("overrides,match", ADVERSARIAL,
                             ids=[m for _, m in ADVERSARIAL])
    def test_adversarial_configs_rejected(self, overrides, match):
        with pytest.raises(ConfigError, match=match):
            RunConfig.from_dict(overrides)

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match=r"unknown config section \[foo\]"):
            RunConfig.from_dict({"foo": {"bar": 1}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key geometry.foo"):
            RunConfig.from_dict({"geometry": {"foo": 1}})

    def test_config_error_is_value_error(self):
        assert issubclass(ConfigError, ValueError)
