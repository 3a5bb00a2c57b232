"""Patch-wise variational autoencoder over TSDF voxel grids.

The encoder is strictly patch-local: one P-strided convolution whose receptive
field is exactly one P^3 patch, followed by per-cell 1x1x1 convolutions, so the
Gaussian parameters at latent cell (i, j, k) depend only on input patch
(i, j, k). The decoder is joint: 3x3x3 convolutions at the latent resolution
mix neighboring patches before log2(P) nearest-upsample stages restore the full
grid, and a final tau*tanh keeps every output inside the truncation band.

Latent layout: the public domain types (``GaussianLatentField``,
``LatentGrid``) are channels-first (c, D/P, D/P, D/P); network internals are
channels-last (batch, x, y, z, c). ``LatentGrid.scale_factor`` records the
calibration factor multiplied in at encode time; ``decode`` divides it back
out, so the decoder always sees the unscaled latent space it was trained on.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from voxdiff.geometry import TsdfGrid, default_origin, default_truncation
from voxdiff.nn import (
    Adam,
    Conv3d,
    GroupNorm,
    LayerNorm,
    Module,
    Tensor,
    absolute,
    clip,
    cosine_lr,
    exp,
    no_grad,
    tanh,
    tensor,
    upsample_nearest3,
)
from voxdiff.nn import silu

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0

CHECKPOINT_FORMAT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class AutoencoderConfig:
    """Architecture hyperparameters for the patch VAE."""

    resolution: int = 32       # D: TSDF grid side
    patch_size: int = 4        # P: cubic patch side (power of two)
    latent_channels: int = 4   # c: channels per latent cell
    enc_width: int = 32
    dec_width: int = 32
    kl_weight: float = 1e-4
    tau_trunc: float = 0.0     # 0 -> default 3 * voxel_size

    def __post_init__(self):
        d, p = self.resolution, self.patch_size
        if d < 1 or p < 1 or d % p != 0:
            raise ValueError(f"patch size {p} must divide resolution {d}")
        if p < 2 or (p & (p - 1)) != 0:
            raise ValueError(f"patch size must be a power of two >= 2, got {p}")
        for name in ("latent_channels", "enc_width", "dec_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.tau_trunc == 0.0:
            object.__setattr__(self, "tau_trunc", default_truncation(d))
        elif self.tau_trunc < 0:
            raise ValueError("tau_trunc must be positive")

    @property
    def latent_side(self) -> int:
        return self.resolution // self.patch_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown autoencoder config keys: {unknown}")
        return cls(**d)


@dataclasses.dataclass
class GaussianLatentField:
    """Per-patch Gaussian parameters on the latent grid, channels-first."""

    mean: np.ndarray          # (c, G, G, G)
    log_variance: np.ndarray  # (c, G, G, G)

    def __post_init__(self):
        self.mean = np.asarray(self.mean)
        self.log_variance = np.asarray(self.log_variance)
        if self.mean.shape != self.log_variance.shape or self.mean.ndim != 4:
            raise ValueError(
                f"mean/log_variance must share a (c, G, G, G) shape, got "
                f"{self.mean.shape} vs {self.log_variance.shape}")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.log_variance).all()):
            raise ValueError("latent field contains non-finite values")
        self.log_variance = np.clip(self.log_variance, LOGVAR_MIN, LOGVAR_MAX)


@dataclasses.dataclass
class LatentGrid:
    """A concrete latent sample, channels-first, with its calibration factor."""

    values: np.ndarray  # (c, G, G, G)
    scale_factor: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4:
            raise ValueError(f"latent values must be (c, G, G, G), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("latent grid contains non-finite values")
        if not (np.isfinite(self.scale_factor) and self.scale_factor > 0):
            raise ValueError(f"scale_factor must be positive, got {self.scale_factor}")


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class PatchEncoder(Module):
    """Strictly patch-local encoder: P-strided stem + per-cell 1x1x1 heads.

    Normalization is per-cell LayerNorm: statistics over the channel axis only,
    so each latent cell still depends on exactly one input patch (a spatial
    norm would couple patches and break that guarantee).
    """

    def __init__(self, config: AutoencoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        p, w, c = config.patch_size, config.enc_width, config.latent_channels
        self.stem = Conv3d(1, w, p, rng, stride=p, dtype=dtype)
        self.norm1 = LayerNorm(w, dtype=dtype)
        self.mix = Conv3d(w, w, 1, rng, dtype=dtype)
        self.norm2 = LayerNorm(w, dtype=dtype)
        self.mean_head = Conv3d(w, c, 1, rng, dtype=dtype)
        self.logvar_head = Conv3d(w, c, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = silu(self.norm1(self.stem(x)))
        h = silu(self.norm2(self.mix(h)))
        return self.mean_head(h), clip(self.logvar_head(h), LOGVAR_MIN, LOGVAR_MAX)


class JointDecoder(Module):
    """Patch-joint decoder: 3x3x3 mixing, log2(P) upsample stages, tau*tanh."""

    def __init__(self, config: AutoencoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        c, w = config.latent_channels, config.dec_width
        self.tau = float(config.tau_trunc)
        self.stem = Conv3d(c, w, 3, rng, padding=1, dtype=dtype)
        self.norm1 = GroupNorm(_norm_groups(w), w, dtype=dtype)
        self.mix = Conv3d(w, w, 3, rng, padding=1, dtype=dtype)
        self.norm2 = GroupNorm(_norm_groups(w), w, dtype=dtype)
        stages, norms = [], []
        width = w
        for _ in range(config.patch_size.bit_length() - 1):
            nxt = max(width // 2, 8)
            stages.append(Conv3d(width, nxt, 3, rng, padding=1, dtype=dtype))
            norms.append(GroupNorm(_norm_groups(nxt), nxt, dtype=dtype))
            width = nxt
        self.stages = stages
        self.norms = norms
        self.head = Conv3d(width, 1, 1, rng, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        h = silu(self.norm1(self.stem(z)))
        h = silu(self.norm2(self.mix(h)))
        for conv, norm in zip(self.stages, self.norms):
            h = silu(norm(conv(upsample_nearest3(h, 2))))
        return tanh(self.head(h)) * self.tau


class AutoencoderParams:
    """Trained encoder/decoder pair plus its config and calibration factor."""

    def __init__(self, config: AutoencoderConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.encoder = PatchEncoder(config, rng, dtype=dtype)
        self.decoder = JointDecoder(config, rng, dtype=dtype)
        self.scale_factor: float | None = None

    def modules(self):
        return [self.encoder, self.decoder]

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def num_params(self) -> int:
        return self.encoder.num_params() + self.decoder.num_params()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.encoder.load_state_dict(
            {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")})
        self.decoder.load_state_dict(
            {k[len("decoder."):]: v for k, v in state.items() if k.startswith("decoder.")})


def _grid_values(g) -> np.ndarray:
    return g.values if isinstance(g, TsdfGrid) else np.asarray(g)


def encode(g, params: AutoencoderParams) -> GaussianLatentField:
    """Per-patch Gaussian parameters for one TSDF grid (channels-first)."""
    values = _grid_values(g)
    d = params.config.resolution
    if values.shape != (d, d, d):
        raise ValueError(
            f"grid shape {values.shape} does not match configured resolution {d}")
    x = tensor(values[None, :, :, :, None], dtype=np.float32)
    with no_grad():
        mean, logvar = params.encoder(x)
    to_cf = lambda t: np.ascontiguousarray(np.transpose(t.data[0], (3, 0, 1, 2)))
    return GaussianLatentField(to_cf(mean), to_cf(logvar))


def reparameterize(f: GaussianLatentField, noise: np.ndarray,
                   scale_factor: float = 1.0) -> LatentGrid:
    """Sample z = (mean + std * noise) * scale_factor."""
    noise = np.asarray(noise)
    if noise.shape != f.mean.shape:
        raise ValueError(
            f"noise shape {noise.shape} does not match latent shape {f.mean.shape}")
    std = np.exp(0.5 * f.log_variance)
    return LatentGrid((f.mean + std * noise) * scale_factor, scale_factor)


def decode(z, params: AutoencoderParams) -> TsdfGrid:
    """Reconstruct a TSDF grid from a latent; undoes the recorded scale."""
    if isinstance(z, LatentGrid):
        values, scale = z.values, z.scale_factor
    else:
        values, scale = np.asarray(z), 1.0
    cfg = params.config
    g = cfg.latent_side
    if values.shape != (cfg.latent_channels, g, g, g):
        raise ValueError(
            f"latent shape {values.shape} does not match config "
            f"({cfg.latent_channels}, {g}, {g}, {g})")
    x = np.transpose(values / scale, (1, 2, 3, 0))[None]
    with no_grad():
        out = params.decoder(tensor(x, dtype=np.float32))
    d = cfg.resolution
    return TsdfGrid(out.data[0, :, :, :, 0], cfg.tau_trunc, 1.0 / d, default_origin(d))


def ae_loss(g, reconstruction, f, kl_weight: float):
    """L1 reconstruction plus weighted KL to the standard normal.

    Accepts numpy arrays or autograd tensors; ``f`` may be a
    ``GaussianLatentField`` or a ``(mean, log_variance)`` pair. Returns
    ``(total, recon_term, kl_term)`` as tensors (call ``.data`` for values).
    """
    target = g.values if isinstance(g, TsdfGrid) else g
    target = target if isinstance(target, Tensor) else tensor(np.asarray(target))
    recon = reconstruction if isinstance(reconstruction, Tensor) else tensor(
        np.asarray(reconstruction))
    if isinstance(f, GaussianLatentField):
        mean, logvar = tensor(f.mean), tensor(f.log_variance)
    else:
        mean, logvar = f
        mean = mean if isinstance(mean, Tensor) else tensor(np.asarray(mean))
        logvar = logvar if isinstance(logvar, Tensor) else tensor(np.asarray(logvar))
    if target.shape != recon.shape:
        raise ValueError(f"shape mismatch: target {target.shape} vs "
                         f"reconstruction {recon.shape}")
    recon_term = absolute(target - recon).mean()
    kl_term = (mean * mean + exp(logvar) - 1.0 - logvar).mean() * 0.5
    total = recon_term + kl_term * kl_weight
    return total, recon_term, kl_term


@dataclasses.dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def _stack_dataset(dataset) -> np.ndarray:
    if hasattr(dataset, "load_all"):  # manifest-like
        dataset = dataset.load_all()
    if isinstance(dataset, np.ndarray):
        grids = dataset
    else:
        grids = np.stack([_grid_values(item) for item in dataset]) if len(dataset) else \
            np.zeros((0, 0, 0, 0))
    if grids.shape[0] == 0:
        raise ValueError("training dataset is empty")
    return np.ascontiguousarray(grids, dtype=np.float32)


def train_autoencoder(dataset, config: AutoencoderConfig,
                      training: TrainingConfig = TrainingConfig(),
                      log_fn=None) -> tuple[AutoencoderParams, dict]:
    """Train the patch VAE; returns params and a per-epoch loss log.

    Deterministic given ``training.seed`` (init, shuffling, and sampling noise
    all derive from it). Aborts with a diagnostic if the loss goes non-finite.
    """
    grids = _stack_dataset(dataset)
    d = config.resolution
    if grids.shape[1:] != (d, d, d):
        raise ValueError(
            f"dataset grids have shape {grids.shape[1:]}, expected {(d, d, d)}")
    init_seed, train_seed = np.random.SeedSequence(training.seed).spawn(2)
    params = AutoencoderParams(config, np.random.default_rng(init_seed))
    rng = np.random.default_rng(train_seed)

    opt = Adam(params.parameters(), lr=training.learning_rate)
    n = grids.shape[0]
    batches_per_epoch = (n + training.batch_size - 1) // training.batch_size
    total_steps = training.epochs * batches_per_epoch
    log = {"epochs": [], "total": [], "recon": [], "kl": []}
    step = 0
    started = time.monotonic()
    for epoch in range(training.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for b in range(batches_per_epoch):
            idx = order[b * training.batch_size:(b + 1) * training.batch_size]
            x = tensor(grids[idx][..., None])
            mean, logvar = params.encoder(x)
            noise = rng.standard_normal(mean.shape, dtype=np.float32)
            z = mean + exp(logvar * 0.5) * noise
            recon = params.decoder(z)
            total, rec, kl = ae_loss(x, recon, (mean, logvar), config.kl_weight)
            if not np.isfinite(total.data):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch + 1} step {b + 1}: "
                    f"total={float(total.data)} recon={float(rec.data)} "
                    f"kl={float(kl.data)}")
            for p in params.parameters():
                p.grad = None
            total.backward()
            opt.lr = cosine_lr(training.learning_rate, step, total_steps)
            opt.step()
            step += 1
            sums += [float(total.data), float(rec.data), float(kl.data)]
        log["epochs"].append(epoch + 1)
        log["total"].append(sums[0] / batches_per_epoch)
        log["recon"].append(sums[1] / batches_per_epoch)
        log["kl"].append(sums[2] / batches_per_epoch)
        if log_fn is not None:
            log_fn(f"epoch {epoch + 1}/{training.epochs}: "
                   f"total {log['total'][-1]:.5f} recon {log['recon'][-1]:.5f} "
                   f"kl {log['kl'][-1]:.4f} "
                   f"({time.monotonic() - started:.0f}s elapsed)")
    return params, log


def compute_scale_factor(dataset, params: AutoencoderParams,
                         max_shapes: int = 256) -> float:
    """1 / pooled per-component std of unscaled latent samples.

    Uses the law of total variance (variance of means across shapes plus the
    average encoded variance) instead of Monte-Carlo sampling, so the factor
    is deterministic. Per-component variances are pooled by averaging.
    """
    grids = _stack_dataset(dataset)[:max_shapes]
    means, variances = [], []
    for values in grids:
        f = encode(values, params)
        means.append(f.mean)
        variances.append(np.exp(f.log_variance))
    means = np.stack(means)
    component_var = means.var(axis=0) + np.stack(variances).mean(axis=0)
    pooled = float(component_var.mean())
    if not np.isfinite(pooled) or pooled <= 1e-20:
        raise ValueError(f"cannot calibrate: pooled latent variance is {pooled}")
    return 1.0 / float(np.sqrt(pooled))


# -- checkpointing -----------------------------------------------------------


def save_autoencoder(directory, params: AutoencoderParams, seed: int = 0,
                     epoch: int = 0, loss_curve: dict | None = None):
    """Write manifest.json (config + calibration + training metadata) and weights."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "autoencoder",
        "config": params.config.to_dict(),
        "scale_factor": params.scale_factor,
        "seed": seed,
        "epoch": epoch,
        "loss_curve": loss_curve or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    np.savez(directory / "weights.npz", **params.state_dict())


def load_autoencoder(directory) -> tuple[AutoencoderParams, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no autoencoder checkpoint at {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") != "autoencoder":
        raise ValueError(
            f"checkpoint at {directory} is a {manifest.get('kind')!r} checkpoint, "
            "expected 'autoencoder'")
    config = AutoencoderConfig.from_dict(manifest["config"])
    params = AutoencoderParams(config)
    with np.load(directory / "weights.npz") as archive:
        params.load_state_dict(dict(archive))
    params.scale_factor = manifest.get("scale_factor")
    return params, manifest
