"""User-facing pipelines: text-to-shape generation, mask-guided shape
completion, and partial-renoising shape manipulation.

All three run in the scaled latent space: shapes are encoded patch-wise to
Gaussian latents, multiplied by the calibration factor recorded on the
autoencoder, denoised by the text-conditioned network, and decoded back to a
TSDF grid. Completion keeps a patch mask's known cells pinned to the encoded
input at every reverse step (the combine ``(1-m)*sampled + m*renoised_known``
applied per transition), so the known region lands exactly on the encoded
input when the chain reaches t=0. Manipulation forward-noises the encoded
input to an intermediate step t_mid and denoises back down under a new
caption; t_mid=0 degenerates to a pure encode/decode round trip and t_mid=T
to caption-driven generation.

``train_diffusion`` fits the denoiser jointly with the trainable text encoder
on encoded dataset latents, dropping the caption with probability ``p_uncond``
so classifier-free guidance has an unconditional branch to extrapolate from.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from voxdiff.autoencoder import AutoencoderParams, GaussianLatentField, LatentGrid, decode, encode
from voxdiff.conditioning import ScoreModel, TextEncoder, Vocabulary, dropout_ids
from voxdiff.denoiser import UinUNet, UinUNetConfig
from voxdiff.diffusion import (
    NoiseSchedule,
    build_schedule,
    ddim_step,
    ddim_step_grid,
    ddpm_step,
    training_loss,
)
from voxdiff.geometry import TsdfGrid
from voxdiff.nn import Adam, cosine_lr, tensor

CHECKPOINT_FORMAT_VERSION = 1
_TEXT_NUM_HEADS = 4


# -- sampler settings and requests --------------------------------------------


@dataclasses.dataclass(frozen=True)
class SamplerSettings:
    """How to run the reverse chain for one task invocation."""

    sampler: str = "ddim"
    num_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 3.0

    def __post_init__(self):
        if self.sampler not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")


@dataclasses.dataclass(frozen=True)
class GenerationRequest:
    caption: str
    k: int = 1
    settings: SamplerSettings = SamplerSettings()
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


# -- patch masks ----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PatchMask:
    """Known/kept-region mask at patch granularity (True = known)."""

    bits: np.ndarray
    resolution: int
    patch_size: int

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.dtype != np.bool_ or bits.ndim != 3:
            raise ValueError("mask bits must be a 3D boolean array")
        if self.resolution % self.patch_size != 0:
            raise ValueError(
                f"patch size {self.patch_size} must divide resolution {self.resolution}")
        g = self.resolution // self.patch_size
        if bits.shape != (g, g, g):
            raise ValueError(
                f"mask shape {bits.shape} does not match patch grid ({g}, {g}, {g})")
        object.__setattr__(self, "bits", bits)

    @property
    def grid_side(self) -> int:
        return self.resolution // self.patch_size


MASK_PRESETS = ("top-half", "bottom-half", "left-half")


def mask_preset(name: str, resolution: int, patch_size: int) -> PatchMask:
    """Named half-space masks; the named half is the known/kept region."""
    g = resolution // patch_size
    if g < 2:
        raise ValueError("patch grid too small for half masks")
    bits = np.zeros((g, g, g), dtype=bool)
    if name == "top-half":
        bits[:, :, g // 2:] = True
    elif name == "bottom-half":
        bits[:, :, :g // 2] = True
    elif name == "left-half":
        bits[:g // 2, :, :] = True
    else:
        raise ValueError(f"unknown mask preset {name!r}; choose from {MASK_PRESETS}")
    return PatchMask(bits, resolution, patch_size)


def save_mask(mask: PatchMask, path) -> None:
    flat = "".join("1" if b else "0" for b in mask.bits.reshape(-1))
    Path(path).write_text(f"{mask.resolution} {mask.patch_size}\n{flat}\n")


def load_mask(path) -> PatchMask:
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        raise ValueError(f"{path}: empty mask file")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"{path}: mask header must be 'D P', got {lines[0]!r}")
    try:
        resolution, patch_size = int(header[0]), int(header[1])
    except ValueError:
        raise ValueError(f"{path}: mask header must be two integers, got {lines[0]!r}")
    body = "".join(lines[1:]).strip()
    if set(body) - {"0", "1"}:
        raise ValueError(f"{path}: mask body may contain only '0' and '1'")
    g = resolution // max(patch_size, 1)
    if len(body) != g ** 3:
        raise ValueError(
            f"{path}: expected {g ** 3} mask bits for D={resolution} P={patch_size}, "
            f"got {len(body)}")
    bits = np.array([c == "1" for c in body], dtype=bool).reshape(g, g, g)
    return PatchMask(bits, resolution, patch_size)


# -- diffusion training ----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class DiffusionTrainingConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    p_uncond: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")


@dataclasses.dataclass
class DiffusionCheckpoint:
    """Denoiser + text encoder + schedule + the latent scale they were trained at."""

    config: UinUNetConfig
    net: UinUNet
    encoder: TextEncoder
    vocab: Vocabulary
    schedule: NoiseSchedule
    schedule_params: dict
    scale_factor: float
    p_uncond: float = 0.1

    def score_model(self) -> ScoreModel:
        return ScoreModel(self.net, self.encoder)


def train_diffusion(fields, captions, config: UinUNetConfig,
                    training: DiffusionTrainingConfig = DiffusionTrainingConfig(),
                    schedule: NoiseSchedule | None = None,
                    schedule_params: dict | None = None,
                    scale_factor: float = 1.0,
                    max_caption_words: int = 16,
                    log_fn=None) -> tuple[DiffusionCheckpoint, dict]:
    """Joint denoiser + text-encoder training on encoded dataset latents.

    ``fields`` are per-shape Gaussian latents; a fresh posterior sample is
    drawn per step (times the calibration factor), so the denoiser sees the
    same latent distribution the sampler will produce into. Deterministic
    given ``training.seed``.
    """
    fields = list(fields)
    captions = list(captions)
    if not fields:
        raise ValueError("training dataset is empty")
    if len(fields) != len(captions):
        raise ValueError(f"{len(fields)} latents vs {len(captions)} captions")
    if schedule is None:
        schedule_params = schedule_params or {}
        schedule = build_schedule(**schedule_params)
        schedule_params = {"T": schedule.T,
                           "beta_start": float(schedule.beta[0]),
                           "beta_end": float(schedule.beta[-1])}
    elif schedule_params is None:
        schedule_params = {"T": schedule.T,
                           "beta_start": float(schedule.beta[0]),
                           "beta_end": float(schedule.beta[-1])}
    g = config.latent_side
    expected = (config.in_channels, g, g, g)
    means, stds = [], []
    for f in fields:
        if not isinstance(f, GaussianLatentField):
            raise TypeError("fields must be GaussianLatentField instances")
        if f.mean.shape != expected:
            raise ValueError(
                f"latent shape {f.mean.shape} does not match denoiser config {expected}")
        # channels-last for the network
        means.append(np.transpose(f.mean, (1, 2, 3, 0)))
        stds.append(np.transpose(np.exp(0.5 * f.log_variance), (1, 2, 3, 0)))
    means = np.stack(means).astype(np.float32)
    stds = np.stack(stds).astype(np.float32)
    scale = np.float32(scale_factor)

    vocab = Vocabulary.from_captions(captions, max_len=max_caption_words)
    ids = np.stack([vocab.ids_for(c) for c in captions])
    null_ids = vocab.null_ids()

    init_seed, train_seed = np.random.SeedSequence(training.seed).spawn(2)
    init_rng = np.random.default_rng(init_seed)
    net = UinUNet(config, init_rng)
    encoder = TextEncoder(vocab, config.cond_embed_dim, init_rng,
                          num_heads=_TEXT_NUM_HEADS)
    rng = np.random.default_rng(train_seed)

    params = net.parameters() + encoder.parameters()
    opt = Adam(params, lr=training.learning_rate)
    n = means.shape[0]
    batches_per_epoch = (n + training.batch_size - 1) // training.batch_size
    total_steps = training.epochs * batches_per_epoch
    log = {"epochs": [], "loss": []}
    step = 0
    started = time.monotonic()
    for epoch in range(training.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(batches_per_epoch):
            idx = order[b * training.batch_size:(b + 1) * training.batch_size]
            noise = rng.standard_normal(means[idx].shape, dtype=np.float32)
            z0 = (means[idx] + stds[idx] * noise) * scale
            batch_ids = dropout_ids(ids[idx], null_ids, training.p_uncond, rng)
            cond = encoder(batch_ids)
            loss, _, _ = training_loss(net, z0, cond, schedule, rng)
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"non-finite diffusion loss at epoch {epoch + 1} step {b + 1}")
            for p in params:
                p.grad = None
            loss.backward()
            opt.lr = cosine_lr(training.learning_rate, step, total_steps)
            opt.step()
            step += 1
            epoch_loss += float(loss.data)
        log["epochs"].append(epoch + 1)
        log["loss"].append(epoch_loss / batches_per_epoch)
        if log_fn is not None:
            log_fn(f"diffusion epoch {epoch + 1}/{training.epochs}: "
                   f"loss {log['loss'][-1]:.5f} "
                   f"({time.monotonic() - started:.0f}s elapsed)")
    ckpt = DiffusionCheckpoint(config=config, net=net, encoder=encoder,
                               vocab=vocab, schedule=schedule,
                               schedule_params=schedule_params,
                               scale_factor=float(scale_factor),
                               p_uncond=training.p_uncond)
    return ckpt, log


def save_diffusion(directory, ckpt: DiffusionCheckpoint, seed: int = 0,
                   epoch: int = 0, loss_curve: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "diffusion",
        "denoiser": ckpt.config.to_dict(),
        "schedule": ckpt.schedule_params,
        "vocab": ckpt.vocab.to_dict(),
        "text_num_heads": _TEXT_NUM_HEADS,
        "scale_factor": ckpt.scale_factor,
        "p_uncond": ckpt.p_uncond,
        "seed": seed,
        "epoch": epoch,
        "loss_curve": loss_curve or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    state = {f"denoiser.{k}": v for k, v in ckpt.net.state_dict().items()}
    state.update({f"text.{k}": v for k, v in ckpt.encoder.state_dict().items()})
    np.savez(directory / "weights.npz", **state)


def load_diffusion(directory) -> tuple[DiffusionCheckpoint, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no diffusion checkpoint at {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") != "diffusion":
        raise ValueError(
            f"checkpoint at {directory} is a {manifest.get('kind')!r} checkpoint, "
            "expected 'diffusion'")
    config = UinUNetConfig.from_dict(manifest["denoiser"])
    vocab = Vocabulary.from_dict(manifest["vocab"])
    rng = np.random.default_rng(0)
    net = UinUNet(config, rng)
    encoder = TextEncoder(vocab, config.cond_embed_dim, rng,
                          num_heads=int(manifest.get("text_num_heads", 4)))
    with np.load(directory / "weights.npz") as archive:
        state = dict(archive)
    net.load_state_dict({k[len("denoiser."):]: v for k, v in state.items()
                         if k.startswith("denoiser.")})
    encoder.load_state_dict({k[len("text."):]: v for k, v in state.items()
                             if k.startswith("text.")})
    sp = manifest["schedule"]
    schedule = build_schedule(T=int(sp["T"]), beta_start=float(sp["beta_start"]),
                              beta_end=float(sp["beta_end"]))
    ckpt = DiffusionCheckpoint(config=config, net=net, encoder=encoder,
                               vocab=vocab, schedule=schedule,
                               schedule_params=dict(sp),
                               scale_factor=float(manifest["scale_factor"]),
                               p_uncond=float(manifest.get("p_uncond", 0.1)))
    return ckpt, manifest


# -- checkpoint compatibility ----------------------------------------------------


def check_compatibility(ae: AutoencoderParams, ckpt: DiffusionCheckpoint) -> None:
    """Raise naming the first mismatched field; silent when compatible."""
    if ae.config.latent_side != ckpt.config.latent_side:
        raise ValueError(
            f"latent_side mismatch: autoencoder {ae.config.latent_side} vs "
            f"denoiser {ckpt.config.latent_side}")
    if ae.config.latent_channels != ckpt.config.in_channels:
        raise ValueError(
            f"latent_channels mismatch: autoencoder {ae.config.latent_channels} vs "
            f"denoiser {ckpt.config.in_channels}")
    if ae.scale_factor is None:
        raise ValueError("scale_factor missing: autoencoder is not calibrated")
    if abs(ae.scale_factor - ckpt.scale_factor) > 1e-9 * max(1.0, abs(ckpt.scale_factor)):
        raise ValueError(
            f"scale_factor mismatch: autoencoder {ae.scale_factor} vs "
            f"diffusion {ckpt.scale_factor}")


def _to_channels_first(z_last: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(z_last, (3, 0, 1, 2)))


def _decode_latent(z_last: np.ndarray, scale: float,
                   ae: AutoencoderParams) -> TsdfGrid:
    return decode(LatentGrid(_to_channels_first(z_last), scale), ae)


# -- generation -------------------------------------------------------------------


def generate(req: GenerationRequest, ae: AutoencoderParams,
             ckpt: DiffusionCheckpoint) -> list[TsdfGrid]:
    """Sample k shapes for one caption; each sample gets its own child seed.

    The k chains run as one batch (one network call per step instead of k),
    but every sample consumes its own rng stream exactly as a solo
    ``sample_loop`` run would, so results are independent of k and of the
    batching itself.
    """
    check_compatibility(ae, ckpt)
    st = req.settings
    schedule = ckpt.schedule
    if st.num_steps > schedule.T:
        raise ValueError(
            f"num_steps {st.num_steps} exceeds schedule length {schedule.T}")
    if st.sampler == "ddpm" and st.num_steps != schedule.T:
        raise ValueError(
            "ddpm walks the full chain; pass num_steps == T or use ddim")
    score_fn = ckpt.score_model().guided_score_fn(req.caption, st.guidance_scale)
    g, c = ckpt.config.latent_side, ckpt.config.in_channels
    shape = (1, g, g, g, c)
    rngs = [np.random.default_rng(child)
            for child in np.random.SeedSequence(req.seed).spawn(req.k)]

    def draw():
        return np.concatenate(
            [r.standard_normal(shape).astype(np.float32) for r in rngs])

    z = draw()
    if st.sampler == "ddpm":
        for t in range(schedule.T, 0, -1):
            eps_hat = score_fn(z, t)
            noise = draw() if t > 1 else None
            z = ddpm_step(z, t, eps_hat, schedule, noise)
    else:
        grid = ddim_step_grid(schedule.T, st.num_steps)
        for i in range(len(grid) - 1, 0, -1):
            t, t_prev = int(grid[i]), int(grid[i - 1])
            eps_hat = score_fn(z, t)
            noise = draw() if st.eta > 0.0 else None
            z = ddim_step(z, t, t_prev, eps_hat, schedule, eta=st.eta, noise=noise)
    return [_decode_latent(z[i], ckpt.scale_factor, ae) for i in range(req.k)]


# -- completion --------------------------------------------------------------------


def _renoised_known(z0_known: np.ndarray, t: int, schedule: NoiseSchedule,
                    rng: np.random.Generator) -> np.ndarray:
    """Forward-sample the known latent to step t (exactly z0 at t=0)."""
    ab = float(schedule.alpha_bar_at(t))
    eps = rng.standard_normal(z0_known.shape, dtype=np.float32)
    dt = z0_known.dtype.type
    return dt(np.sqrt(ab)) * z0_known + dt(np.sqrt(1.0 - ab)) * eps


def complete_shape(partial: TsdfGrid, mask: PatchMask, caption: str,
                   ae: AutoencoderParams, ckpt: DiffusionCheckpoint,
                   settings: SamplerSettings = SamplerSettings(),
                   seed: int = 0, trace_fn=None,
                   return_latent: bool = False):
    """Fill the unknown region of a partial shape under a caption.

    The partial input is encoded to its latent mean (scaled); at every reverse
    transition the known cells are replaced by a fresh forward sample of that
    latent at the target step, and the unknown cells keep the denoiser's
    sample. At the final step the known cells equal the encoded latent
    exactly. ``trace_fn(t, t_prev, sampled, renoised, combined)`` observes
    every transition.
    """
    check_compatibility(ae, ckpt)
    if mask.resolution != ae.config.resolution:
        raise ValueError(
            f"mask resolution {mask.resolution} does not match autoencoder "
            f"resolution {ae.config.resolution}")
    if mask.patch_size != ae.config.patch_size:
        raise ValueError(
            f"mask patch size {mask.patch_size} does not match autoencoder "
            f"patch size {ae.config.patch_size}")
    known = bool(mask.bits.all())
    unknown = bool((~mask.bits).all())
    if known or unknown:
        raise ValueError("degenerate mask: completion needs both known and "
                         "unknown patches")

    field = encode(partial, ae)
    z0_known = np.transpose(field.mean, (1, 2, 3, 0)).astype(np.float32)
    z0_known = (z0_known * np.float32(ckpt.scale_factor))[None]
    m = mask.bits[None, :, :, :, None]

    score_fn = ckpt.score_model().guided_score_fn(caption, settings.guidance_scale)
    schedule = ckpt.schedule
    g, c = ckpt.config.latent_side, ckpt.config.in_channels
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    z = rng.standard_normal((1, g, g, g, c)).astype(np.float32)

    if settings.sampler == "ddpm":
        if settings.num_steps != schedule.T:
            raise ValueError("ddpm walks the full chain; pass num_steps == T")
        transitions = [(t, t - 1) for t in range(schedule.T, 0, -1)]
    else:
        grid = ddim_step_grid(schedule.T, settings.num_steps)
        transitions = [(int(grid[i]), int(grid[i - 1]))
                       for i in range(len(grid) - 1, 0, -1)]

    for t, t_prev in transitions:
        eps_hat = score_fn(z, t)
        if settings.sampler == "ddpm":
            noise = rng.standard_normal(z.shape).astype(np.float32) if t > 1 else None
            sampled = ddpm_step(z, t, eps_hat, schedule, noise)
        else:
            noise = rng.standard_normal(z.shape).astype(np.float32) \
                if settings.eta > 0 else None
            sampled = ddim_step(z, t, t_prev, eps_hat, schedule,
                                eta=settings.eta, noise=noise)
        renoised = _renoised_known(z0_known, t_prev, schedule, rng)
        z = np.where(m, renoised, sampled)
        if trace_fn is not None:
            trace_fn(t, t_prev, sampled, renoised, z)

    grid_out = _decode_latent(z[0], ckpt.scale_factor, ae)
    if return_latent:
        return grid_out, LatentGrid(_to_channels_first(z[0]), ckpt.scale_factor)
    return grid_out


# -- manipulation -------------------------------------------------------------------


def manipulate_shape(init: TsdfGrid, caption: str, t_mid: int,
                     ae: AutoencoderParams, ckpt: DiffusionCheckpoint,
                     settings: SamplerSettings = SamplerSettings(),
                     seed: int = 0, return_latent: bool = False):
    """Re-noise an encoded shape up to step t_mid, then denoise under a caption.

    t_mid is given in original schedule units and snaps to the nearest step of
    the sampler's grid. t_mid=0 returns the plain encode/decode round trip of
    the input (no diffusion); t_mid=T discards essentially all input structure.
    """
    check_compatibility(ae, ckpt)
    schedule = ckpt.schedule
    if not 0 <= t_mid <= schedule.T:
        raise ValueError(f"t_mid must lie in [0, {schedule.T}], got {t_mid}")

    field = encode(init, ae)

    if settings.sampler == "ddpm":
        t_start = int(t_mid)
        transitions = [(t, t - 1) for t in range(t_start, 0, -1)]
    else:
        grid = ddim_step_grid(schedule.T, settings.num_steps)
        start_idx = int(np.argmin(np.abs(grid - t_mid)))
        t_start = int(grid[start_idx])
        transitions = [(int(grid[i]), int(grid[i - 1]))
                       for i in range(start_idx, 0, -1)]

    if t_start == 0:
        out = decode(LatentGrid(field.mean, 1.0), ae)
        if return_latent:
            return out, LatentGrid(field.mean.copy(), 1.0)
        return out

    z_init = np.transpose(field.mean, (1, 2, 3, 0)).astype(np.float32)
    z_init = (z_init * np.float32(ckpt.scale_factor))[None]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ab = float(schedule.alpha_bar_at(t_start))
    eps = rng.standard_normal(z_init.shape, dtype=np.float32)
    z = np.float32(np.sqrt(ab)) * z_init + np.float32(np.sqrt(1.0 - ab)) * eps

    score_fn = ckpt.score_model().guided_score_fn(caption, settings.guidance_scale)
    for t, t_prev in transitions:
        eps_hat = score_fn(z, t)
        if settings.sampler == "ddpm":
            noise = rng.standard_normal(z.shape).astype(np.float32) if t > 1 else None
            z = ddpm_step(z, t, eps_hat, schedule, noise)
        else:
            noise = rng.standard_normal(z.shape).astype(np.float32) \
                if settings.eta > 0 else None
            z = ddim_step(z, t, t_prev, eps_hat, schedule,
                          eta=settings.eta, noise=noise)

    grid_out = _decode_latent(z[0], ckpt.scale_factor, ae)
    if return_latent:
        return grid_out, LatentGrid(_to_channels_first(z[0]), ckpt.scale_factor)
    return grid_out
