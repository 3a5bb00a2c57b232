"""Run configuration: one structured document covering every pipeline stage.

A RunConfig is loaded from a TOML file (nested sections, key/value pairs),
merged with optional overrides, and validated for cross-field consistency
before any stage runs. Each section maps onto one stage's config object via
the ``*_config()`` accessors, so a single file pins an entire reproducible
run; ``digest()`` hashes the resolved document for run records.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from voxdiff.autoencoder import AutoencoderConfig, TrainingConfig
from voxdiff.dataset import CATEGORIES
from voxdiff.denoiser import UinUNetConfig
from voxdiff.tasks import DiffusionTrainingConfig, SamplerSettings

CONFIG_FORMAT_VERSION = 1

_TEXT_NUM_HEADS = 4


class ConfigError(ValueError):
    """A malformed or internally inconsistent run configuration."""


DESK_DEFAULTS: dict = {
    "geometry": {
        "resolution": 32,
        "patch_size": 4,
        "tau_trunc": 0.0,  # 0 -> 3 * voxel size
    },
    "autoencoder": {
        "latent_channels": 4,
        "enc_width": 48,
        "dec_width": 48,
        "kl_weight": 1e-5,
        "epochs": 50,
        "batch_size": 4,
        "learning_rate": 2e-3,
        "seed": 0,
    },
    "schedule": {
        "T": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
    },
    "denoiser": {
        "base_width": 32,
        "depth": 3,
        "inner_enabled": True,
        "inner_blocks": 4,
        "inner_attention_enabled": True,
        "inout_concat_enabled": True,
        "time_embed_dim": 64,
        "cond_embed_dim": 64,
        "num_heads": 4,
    },
    "conditioning": {
        "max_caption_words": 16,
        "p_uncond": 0.1,
    },
    "diffusion_training": {
        "epochs": 40,
        "batch_size": 16,
        "learning_rate": 1e-3,
        "seed": 0,
    },
    "sampler": {
        "sampler": "ddim",
        "num_steps": 50,
        "eta": 0.0,
        "guidance_scale": 3.0,
    },
    "dataset": {
        "n_shapes": 200,
        "categories": list(CATEGORIES),
        "seed": 123,
    },
}

# Paper-scale preset: same pipeline at the full grid size.
PAPER_OVERRIDES: dict = {
    "geometry": {"resolution": 64, "patch_size": 8},
    "denoiser": {"base_width": 64},
}

PRESETS = ("desk", "paper")


def default_config(preset: str = "desk") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    base = copy.deepcopy(DESK_DEFAULTS)
    if preset == "paper":
        _merge(base, PAPER_OVERRIDES)
    return base


def _merge(base: dict, overrides: dict) -> dict:
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def _check_unknown(document: dict) -> None:
    for section, values in document.items():
        if section not in DESK_DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"config section [{section}] must be a table")
        for key in values:
            if key not in DESK_DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")


class RunConfig:
    """Validated run document; construct via from_file/from_dict."""

    def __init__(self, document: dict):
        _check_unknown(document)
        resolved = copy.deepcopy(DESK_DEFAULTS)
        _merge(resolved, document)
        self._doc = resolved
        self._validate()

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            with path.open("rb") as f:
                document = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}")
        if overrides:
            _check_unknown(overrides)
            _merge(document, overrides)
        return cls(document)

    @classmethod
    def from_dict(cls, document: dict) -> "RunConfig":
        return cls(copy.deepcopy(document))

    # -- validation -----------------------------------------------------------

    def _validate(self) -> None:
        doc = self._doc
        geo, ae = doc["geometry"], doc["autoencoder"]
        dn, cond = doc["denoiser"], doc["conditioning"]
        sch, smp, ds = doc["schedule"], doc["sampler"], doc["dataset"]

        d, p = geo["resolution"], geo["patch_size"]
        if d < 1 or p < 1:
            raise ConfigError("geometry.resolution and geometry.patch_size must "
                              "be positive")
        if d % p != 0:
            raise ConfigError(
                f"geometry.patch_size ({p}) must divide geometry.resolution ({d})")
        if p < 2 or (p & (p - 1)) != 0:
            raise ConfigError(
                f"geometry.patch_size must be a power of two >= 2, got {p}")
        if geo["tau_trunc"] < 0:
            raise ConfigError("geometry.tau_trunc must be >= 0")

        side = d // p
        stride_total = 2 ** (dn["depth"] - 1)
        if dn["depth"] < 1:
            raise ConfigError("denoiser.depth must be >= 1")
        if side % stride_total != 0:
            raise ConfigError(
                f"latent side {side} (resolution/patch_size) is not divisible by "
                f"2^(denoiser.depth-1) = {stride_total}")
        if dn["base_width"] % dn["num_heads"] != 0:
            raise ConfigError(
                f"denoiser.num_heads ({dn['num_heads']}) must divide "
                f"denoiser.base_width ({dn['base_width']})")
        if dn["time_embed_dim"] % 2 != 0:
            raise ConfigError("denoiser.time_embed_dim must be even")
        if dn["cond_embed_dim"] % _TEXT_NUM_HEADS != 0:
            raise ConfigError(
                f"denoiser.cond_embed_dim must be a multiple of {_TEXT_NUM_HEADS} "
                "(text encoder attention heads)")

        if ae["latent_channels"] < 1:
            raise ConfigError("autoencoder.latent_channels must be >= 1")
        if ae["kl_weight"] < 0:
            raise ConfigError("autoencoder.kl_weight must be >= 0")
        for section_name, section in (("autoencoder", ae),
                                      ("diffusion_training", doc["diffusion_training"])):
            if section["epochs"] < 1 or section["batch_size"] < 1:
                raise ConfigError(
                    f"{section_name}.epochs and {section_name}.batch_size must be >= 1")
            if section["learning_rate"] <= 0:
                raise ConfigError(f"{section_name}.learning_rate must be positive")

        if sch["T"] < 1:
            raise ConfigError("schedule.T must be >= 1")
        if not 0 < sch["beta_start"] < sch["beta_end"] < 1:
            raise ConfigError(
                "schedule betas must satisfy 0 < beta_start < beta_end < 1, got "
                f"beta_start={sch['beta_start']} beta_end={sch['beta_end']}")

        if smp["sampler"] not in ("ddim", "ddpm"):
            raise ConfigError(f"unknown sampler.sampler {smp['sampler']!r}")
        if smp["num_steps"] < 1:
            raise ConfigError("sampler.num_steps must be >= 1")
        if smp["num_steps"] > sch["T"]:
            raise ConfigError(
                f"sampler.num_steps ({smp['num_steps']}) exceeds schedule.T "
                f"({sch['T']})")
        if smp["sampler"] == "ddpm" and smp["num_steps"] != sch["T"]:
            raise ConfigError(
                "ddpm walks every step: sampler.num_steps must equal schedule.T")
        if smp["eta"] < 0:
            raise ConfigError("sampler.eta must be >= 0")
        if smp["guidance_scale"] < 0:
            raise ConfigError("sampler.guidance_scale must be >= 0")

        if not 0 <= cond["p_uncond"] <= 1:
            raise ConfigError("conditioning.p_uncond must lie in [0, 1]")
        if cond["max_caption_words"] < 1:
            raise ConfigError("conditioning.max_caption_words must be >= 1")

        if ds["n_shapes"] < 1:
            raise ConfigError("dataset.n_shapes must be >= 1")
        cats = ds["categories"]
        if not cats:
            raise ConfigError("dataset.categories must not be empty")
        unknown = sorted(set(cats) - set(CATEGORIES))
        if unknown:
            raise ConfigError(
                f"unknown dataset categories {unknown}; choose from {CATEGORIES}")

        # Instantiating the stage configs runs their own validators too.
        self.autoencoder_config()
        self.denoiser_config()
        self.sampler_settings()

    # -- accessors --------------------------------------------------------------

    def to_dict(self) -> dict:
        return copy.deepcopy(self._doc)

    def __getitem__(self, section: str) -> dict:
        return copy.deepcopy(self._doc[section])

    def digest(self) -> str:
        blob = json.dumps(self._doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def resolution(self) -> int:
        return self._doc["geometry"]["resolution"]

    @property
    def patch_size(self) -> int:
        return self._doc["geometry"]["patch_size"]

    @property
    def latent_side(self) -> int:
        return self.resolution // self.patch_size

    def autoencoder_config(self) -> AutoencoderConfig:
        geo, ae = self._doc["geometry"], self._doc["autoencoder"]
        return AutoencoderConfig(
            resolution=geo["resolution"], patch_size=geo["patch_size"],
            latent_channels=ae["latent_channels"], enc_width=ae["enc_width"],
            dec_width=ae["dec_width"], kl_weight=ae["kl_weight"],
            tau_trunc=geo["tau_trunc"])

    def ae_training_config(self) -> TrainingConfig:
        ae = self._doc["autoencoder"]
        return TrainingConfig(epochs=ae["epochs"], batch_size=ae["batch_size"],
                              learning_rate=ae["learning_rate"], seed=ae["seed"])

    def denoiser_config(self, plain_unet: bool = False) -> UinUNetConfig:
        dn, ae = self._doc["denoiser"], self._doc["autoencoder"]
        return UinUNetConfig(
            latent_side=self.latent_side, in_channels=ae["latent_channels"],
            base_width=dn["base_width"], depth=dn["depth"],
            inner_enabled=dn["inner_enabled"] and not plain_unet,
            inner_blocks=dn["inner_blocks"],
            inner_attention_enabled=dn["inner_attention_enabled"] and not plain_unet,
            inout_concat_enabled=dn["inout_concat_enabled"] and not plain_unet,
            time_embed_dim=dn["time_embed_dim"],
            cond_embed_dim=dn["cond_embed_dim"], num_heads=dn["num_heads"])

    def diffusion_training_config(self) -> DiffusionTrainingConfig:
        dt, cond = self._doc["diffusion_training"], self._doc["conditioning"]
        return DiffusionTrainingConfig(
            epochs=dt["epochs"], batch_size=dt["batch_size"],
            learning_rate=dt["learning_rate"], p_uncond=cond["p_uncond"],
            seed=dt["seed"])

    def schedule_params(self) -> dict:
        sch = self._doc["schedule"]
        return {"T": sch["T"], "beta_start": sch["beta_start"],
                "beta_end": sch["beta_end"]}

    def sampler_settings(self, **overrides) -> SamplerSettings:
        smp = dict(self._doc["sampler"])
        smp.update(overrides)
        return SamplerSettings(sampler=smp["sampler"], num_steps=smp["num_steps"],
                               eta=smp["eta"], guidance_scale=smp["guidance_scale"])

    def max_caption_words(self) -> int:
        return self._doc["conditioning"]["max_caption_words"]
