"""The three generative parameterizations: DCGAN, DCVAE, and the hybrid
VAE-GAN, with their losses and training loops.

Architectures follow a shared pattern: strided-convolution encoders with
leaky-ReLU and batch-norm, decoders/generators that upsample back to the
grid through transposed convolutions (VAE family) or nearest-resize plus
convolution blocks (GAN generator), and tanh output heads so every sample
lives in (-1, 1).  Filter counts, kernel sizes and the latent width are all
configuration; the desk defaults quarter the filter counts of the
full-scale setup.

Training is single-threaded and bit-deterministic under a fixed seed: one
RNG stream drives shuffling, latent draws, dropout masks and noise
injection in a fixed order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError
from .fields import Dataset, normalize_array
from .nn import AdamState, LayerSpec, Network, Tensor, adam_step, backward, grad
from .nn import save_network, load_network
from .nn import tensor as T

MODEL_KINDS = ("dcgan", "dcvae", "vaegan")


# -- configuration -----------------------------------------------------------------


@dataclass
class ModelConfig:
    kind: str
    latent_dim: int = 32
    base_filters: int = 8
    kernel: int = 3
    # loss weights
    beta: float = 0.05
    gamma_perceptual: float = 0.1
    lambda_l1: float = 1.0
    lambda_l2: float = 1.0
    gamma_r1: float = 10.0
    r1_interval: int = 4            # lazy regularization cadence (penalty scaled to compensate)
    # optimization
    lr: float = 1e-3
    lr_disc: float = 2e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_betas_adv: tuple[float, float] = (0.5, 0.999)
    clip_norm: float | None = None
    batch: int = 32
    epochs: int = 40
    iterations: int = 2000          # dcgan trains by iteration count
    # schedules
    patience: int = 20
    min_delta: float = 5e-4
    lr_patience: int = 5
    lr_factor: float = 0.5
    eval_every: int = 100           # dcgan metric cadence
    # regularization details
    disc_noise_std: float = 0.1
    disc_dropout: float = 0.3
    enc_dropout_conv: float = 0.4
    enc_dropout_dense: float = 0.3
    dec_dropout: float = 0.2

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")


def dcvae_config(**overrides) -> ModelConfig:
    cfg = dict(kind="dcvae", lr=1.5e-3, batch=64, epochs=40, beta=0.05, kernel=3,
               enc_dropout_conv=0.05, enc_dropout_dense=0.05, dec_dropout=0.0)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def dcgan_config(**overrides) -> ModelConfig:
    cfg = dict(kind="dcgan", lr=2e-4, lr_disc=5e-5, batch=32, iterations=800, kernel=3,
               base_filters=4, disc_noise_std=0.1)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def vaegan_config(**overrides) -> ModelConfig:
    cfg = dict(kind="vaegan", lr=5e-4, lr_disc=2e-4, batch=32, epochs=25, beta=0.2,
               kernel=5, clip_norm=1.0, base_filters=6)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def config_for(kind: str, **overrides) -> ModelConfig:
    return {"dcvae": dcvae_config, "dcgan": dcgan_config, "vaegan": vaegan_config}[kind](**overrides)


# -- architecture builders ------------------------------------------------------------


def _down_chain(h: int, w: int, n_max: int = 4, floor: int = 6) -> list[tuple[int, int]]:
    """Spatial sizes from the grid down to the decoder base, halving (ceil)."""
    sizes = [(h, w)]
    while len(sizes) <= n_max and max(sizes[-1]) > floor:
        hh, ww = sizes[-1]
        sizes.append((-(-hh // 2), -(-ww // 2)))
    return sizes


def build_encoder(hw: tuple[int, int], cfg: ModelConfig, seed: int,
                  filters: list[int] | None = None, n_stages: int | None = None,
                  trunk_units: int | None = None, dropout_conv: float | None = 0.4,
                  dropout_dense: float | None = 0.3, dtype=np.float32) -> tuple[Network, Network, Network]:
    """(trunk, mu head, log-variance head) for the VAE family."""
    chain = _down_chain(*hw)
    n_stages = n_stages if n_stages is not None else min(len(chain) - 1 + 1, 4)
    f = cfg.base_filters
    filters = filters or [f * 2**i for i in range(n_stages)]
    specs: list[LayerSpec] = []
    for fl in filters:
        specs.append(LayerSpec("conv2d", filters=fl, kernel=cfg.kernel, stride=2, padding="same"))
        specs.append(LayerSpec("activation", activation="leaky-relu", alpha=0.2))
        specs.append(LayerSpec("batch-norm"))
    if dropout_conv:
        specs.append(LayerSpec("dropout", rate=dropout_conv))
    specs.append(LayerSpec("flatten"))
    units = trunk_units if trunk_units is not None else 8 * f
    specs.append(LayerSpec("dense", units=units))
    specs.append(LayerSpec("activation", activation="leaky-relu", alpha=0.2))
    if dropout_dense:
        specs.append(LayerSpec("dropout", rate=dropout_dense))
    trunk = Network((1, hw[0], hw[1]), specs, seed=seed, dtype=dtype)
    mu_head = Network(trunk.output_shape, [LayerSpec("dense", units=cfg.latent_dim)], seed=seed + 1, dtype=dtype)
    lv_head = Network(trunk.output_shape, [LayerSpec("dense", units=cfg.latent_dim)], seed=seed + 2, dtype=dtype)
    return trunk, mu_head, lv_head


def build_decoder(hw: tuple[int, int], cfg: ModelConfig, seed: int,
                  filters: list[int] | None = None, dropout_dense: float | None = 0.2,
                  dtype=np.float32) -> Network:
    """Dense projection then transposed-conv upsampling to the grid, tanh head."""
    chain = _down_chain(*hw)
    sizes = list(reversed(chain))                       # base ... grid
    n_up = len(sizes) - 1
    f = cfg.base_filters
    filters = filters or [f * 2 ** (n_up - 1 - i) for i in range(n_up)]
    base_h, base_w = sizes[0]
    base_c = filters[0] * 2 if filters else f
    specs: list[LayerSpec] = [
        LayerSpec("dense", units=base_c * base_h * base_w),
        LayerSpec("activation", activation="leaky-relu", alpha=0.2),
    ]
    if dropout_dense:
        specs.append(LayerSpec("dropout", rate=dropout_dense))
    specs.append(LayerSpec("reshape", out_shape=(base_c, base_h, base_w)))
    for i, fl in enumerate(filters):
        oh, ow = sizes[i + 1]
        specs.append(LayerSpec("conv2d-transpose", filters=fl, kernel=cfg.kernel, stride=2,
                               padding="same", out_shape=(fl, oh, ow)))
        specs.append(LayerSpec("activation", activation="leaky-relu", alpha=0.2))
        specs.append(LayerSpec("batch-norm"))
    specs.append(LayerSpec("conv2d", filters=1, kernel=cfg.kernel, stride=1, padding="same"))
    specs.append(LayerSpec("activation", activation="tanh"))
    return Network((cfg.latent_dim,), specs, seed=seed, dtype=dtype)


def build_generator(hw: tuple[int, int], cfg: ModelConfig, seed: int,
                    filters: list[int] | None = None, bn_momentum: float = 0.9,
                    dtype=np.float32) -> Network:
    """Resize-then-convolution upsampling generator with batch-norm and ReLU.

    Running-statistics momentum is faster than the inference default so that
    sampling in inference mode tracks the training distribution closely.
    """
    chain = _down_chain(*hw)
    sizes = list(reversed(chain))
    n_up = len(sizes) - 1
    f = cfg.base_filters
    filters = filters or [f * 2 ** max(n_up - i, 1) for i in range(n_up + 1)]
    base_h, base_w = sizes[0]
    c0 = filters[0]
    specs: list[LayerSpec] = [
        LayerSpec("dense", units=c0 * base_h * base_w),
        LayerSpec("reshape", out_shape=(c0, base_h, base_w)),
        LayerSpec("batch-norm", momentum=bn_momentum),
        LayerSpec("activation", activation="relu"),
        LayerSpec("conv2d", filters=filters[0], kernel=cfg.kernel, stride=1, padding="same"),
        LayerSpec("batch-norm", momentum=bn_momentum),
        LayerSpec("activation", activation="relu"),
    ]
    for i in range(n_up):
        oh, ow = sizes[i + 1]
        specs.append(LayerSpec("resize", out_shape=(filters[i], oh, ow)))
        specs.append(LayerSpec("conv2d", filters=filters[i + 1], kernel=cfg.kernel, stride=1, padding="same"))
        last = i == n_up - 1
        if not last:
            specs.append(LayerSpec("batch-norm", momentum=bn_momentum))
        specs.append(LayerSpec("activation", activation="relu"))
    specs.append(LayerSpec("conv2d", filters=max(filters[-1] // 2, 2), kernel=cfg.kernel, stride=1, padding="same"))
    specs.append(LayerSpec("activation", activation="relu"))
    specs.append(LayerSpec("conv2d", filters=1, kernel=1, stride=1, padding=0))
    specs.append(LayerSpec("activation", activation="tanh"))
    specs.append(LayerSpec("resize", out_shape=(1, hw[0], hw[1])))   # ensure output shape
    return Network((cfg.latent_dim,), specs, seed=seed, dtype=dtype)


def build_discriminator(hw: tuple[int, int], cfg: ModelConfig, seed: int,
                        spectral: bool = False, noise_std: float = 0.0,
                        dropout: float = 0.0, pooled: bool = True,
                        filters: list[int] | None = None, dtype=np.float32) -> Network:
    """Downsampling critic ending in a single linear score."""
    f = cfg.base_filters
    specs: list[LayerSpec] = []
    if noise_std > 0:
        specs.append(LayerSpec("gaussian-noise", std=noise_std))
    if pooled:
        filters = filters or [2 * f, 4 * f, 8 * f, 16 * f, 16 * f, 32 * f]
        specs += [
            LayerSpec("conv2d", filters=filters[0], kernel=1, stride=1, padding=0, spectral_norm=spectral),
            LayerSpec("activation", activation="leaky-relu", alpha=0.2),
        ]
        hh, ww = hw
        for fl in filters[1:-1]:
            specs += [
                LayerSpec("conv2d", filters=fl, kernel=cfg.kernel, stride=1, padding="same", spectral_norm=spectral),
                LayerSpec("activation", activation="leaky-relu", alpha=0.2),
            ]
            if hh % 2 == 0 and ww % 2 == 0 and min(hh, ww) > 2:
                specs.append(LayerSpec("avg-pool", kernel=2))
                hh, ww = hh // 2, ww // 2
        specs += [
            LayerSpec("conv2d", filters=filters[-1], kernel=cfg.kernel, stride=1, padding="same", spectral_norm=spectral),
            LayerSpec("activation", activation="leaky-relu", alpha=0.2),
            LayerSpec("global-avg-pool"),
            LayerSpec("dense", units=1, spectral_norm=spectral),
        ]
    else:
        filters = filters or [2 * f, 4 * f, 8 * f]
        for fl in filters:
            specs.append(LayerSpec("conv2d", filters=fl, kernel=cfg.kernel, stride=2, padding="same", spectral_norm=spectral))
            specs.append(LayerSpec("activation", activation="leaky-relu", alpha=0.2))
            if dropout > 0:
                specs.append(LayerSpec("dropout", rate=dropout))
        specs.append(LayerSpec("flatten"))
        specs.append(LayerSpec("dense", units=1, spectral_norm=spectral))
    return Network((1, hw[0], hw[1]), specs, seed=seed, dtype=dtype)


# -- model container ----------------------------------------------------------------


@dataclass
class GenerativeModel:
    kind: str
    config: ModelConfig
    nets: dict[str, Network]
    grid_hw: tuple[int, int]
    bounds: tuple[float, float]
    dataset_fingerprint: str = ""

    def __post_init__(self):
        required = {
            "dcgan": {"generator", "discriminator"},
            "dcvae": {"enc_trunk", "enc_mu", "enc_logvar", "decoder"},
            "vaegan": {"enc_trunk", "enc_mu", "enc_logvar", "decoder", "discriminator"},
        }[self.kind]
        if set(self.nets) != required:
            raise ConfigError(f"{self.kind} needs nets {sorted(required)}, got {sorted(self.nets)}")

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def has_encoder(self) -> bool:
        return "enc_trunk" in self.nets

    def decoder_net(self) -> Network:
        return self.nets["generator" if self.kind == "dcgan" else "decoder"]

    def trainable(self, group: str) -> dict[str, Tensor]:
        names = {
            "encoder": ("enc_trunk", "enc_mu", "enc_logvar"),
            "decoder": ("decoder",),
            "generator": ("generator",),
            "discriminator": ("discriminator",),
            "enc_dec": ("enc_trunk", "enc_mu", "enc_logvar", "decoder"),
        }[group]
        params: dict[str, Tensor] = {}
        for n in names:
            for k, v in self.nets[n].params.items():
                params[f"{n}/{k}"] = v
        return params


def build_model(kind: str, grid_hw: tuple[int, int], cfg: ModelConfig | None = None,
                seed: int = 0, bounds: tuple[float, float] = (-1.0, 1.0)) -> GenerativeModel:
    cfg = cfg or config_for(kind)
    if cfg.kind != kind:
        raise ConfigError(f"config kind {cfg.kind!r} != requested {kind!r}")
    if kind == "dcvae":
        trunk, mu, lv = build_encoder(grid_hw, cfg, seed, dropout_conv=cfg.enc_dropout_conv or None,
                                      dropout_dense=cfg.enc_dropout_dense or None)
        dec = build_decoder(grid_hw, cfg, seed + 10, dropout_dense=cfg.dec_dropout or None)
        nets = {"enc_trunk": trunk, "enc_mu": mu, "enc_logvar": lv, "decoder": dec}
    elif kind == "dcgan":
        gen = build_generator(grid_hw, cfg, seed)
        disc = build_discriminator(grid_hw, cfg, seed + 10, pooled=True,
                                   noise_std=cfg.disc_noise_std)
        nets = {"generator": gen, "discriminator": disc}
    else:
        trunk, mu, lv = build_encoder(grid_hw, cfg, seed, dropout_conv=None,
                                      trunk_units=int(28.8 * cfg.base_filters))
        dec = build_decoder(grid_hw, cfg, seed + 10, dropout_dense=None)
        disc = build_discriminator(grid_hw, cfg, seed + 20, spectral=True,
                                   noise_std=cfg.disc_noise_std, dropout=cfg.disc_dropout,
                                   pooled=False)
        nets = {"enc_trunk": trunk, "enc_mu": mu, "enc_logvar": lv, "decoder": dec,
                "discriminator": disc}
    return GenerativeModel(kind, cfg, nets, tuple(grid_hw), tuple(bounds))


# -- encode / decode surface -----------------------------------------------------------


def _batched(n: int, size: int = 256):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def encode(model: GenerativeModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized fields (N, H, W) -> per-sample (mu, log-variance)."""
    if not model.has_encoder:
        raise ConfigError("model has no encoder")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    mu = np.empty((x.shape[0], model.latent_dim))
    lv = np.empty_like(mu)
    with T.no_grad():
        for sl in _batched(x.shape[0]):
            h = model.nets["enc_trunk"].forward(Tensor(x[sl][:, None]), training=False)
            mu[sl] = model.nets["enc_mu"].forward(h, training=False).data
            lv[sl] = model.nets["enc_logvar"].forward(h, training=False).data
    return mu, lv


def decode(model: GenerativeModel, z: np.ndarray) -> np.ndarray:
    """Latent batch (N, N_z) -> normalized fields (N, H, W) in (-1, 1)."""
    z = np.asarray(z, dtype=np.float32)
    if z.ndim == 1:
        z = z[None]
    if z.shape[1] != model.latent_dim:
        raise ConfigError(f"latent dimension {z.shape[1]} != model latent_dim {model.latent_dim}")
    net = model.decoder_net()
    out = np.empty((z.shape[0],) + model.grid_hw)
    with T.no_grad():
        for sl in _batched(z.shape[0]):
            y = net.forward(Tensor(z[sl]), training=False)
            out[sl] = y.data[:, 0]
    return out


def sample_latent(mu, log_var, seed: int | None = None, eps=None):
    """Reparameterized draw z = mu + exp(log_var / 2) * eps.

    Accepts numpy arrays (returns an array) or tensors (returns a tensor and
    stays differentiable w.r.t. mu and log_var).
    """
    if isinstance(mu, Tensor) or isinstance(log_var, Tensor):
        if eps is None:
            rng = np.random.default_rng(seed)
            eps = rng.normal(size=mu.shape).astype(mu.data.dtype)
        eps_t = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=mu.data.dtype))
        return T.add(mu, T.mul(T.exp(T.mul(log_var, 0.5)), eps_t))
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if eps is None:
        if seed is None:
            raise ConfigError("sample_latent needs a seed or explicit eps")
        eps = np.random.default_rng(seed).normal(size=mu.shape)
    return mu + np.exp(0.5 * log_var) * np.asarray(eps, dtype=np.float64)


def encode_latents(model: GenerativeModel, x: np.ndarray, seed: int) -> np.ndarray:
    """Canonical latent representation of fields: a reparameterized sample of
    the encoder distribution (deterministic under the seed).  The sampled form
    keeps unused latent coordinates dispersed at the prior scale, which both
    the latent-statistics check and the smoother initialization rely on."""
    mu, lv = encode(model, x)
    return sample_latent(mu, lv, seed=seed)


def prior_latents(model: GenerativeModel, n: int, seed: int) -> np.ndarray:
    """Standard-normal latents (the generator prior; used for the GAN)."""
    return np.random.default_rng(seed).normal(size=(n, model.latent_dim))


def facies_decode(values: np.ndarray, levels: np.ndarray | list) -> np.ndarray:
    """Assign each cell the class of the nearest level; ties go to the lower class."""
    values = np.asarray(values, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    dist = np.abs(values[..., None] - levels)           # (..., n_levels)
    return np.argmin(dist, axis=-1)                     # argmin takes the first (lower) on ties


# -- losses ------------------------------------------------------------------------------


def elbo_loss(x: Tensor, xhat: Tensor, mu: Tensor, log_var: Tensor,
              beta: float) -> tuple[Tensor, Tensor, Tensor]:
    """(total, reconstruction, KL): mean-squared reconstruction plus the
    beta-weighted Gaussian KL to the standard-normal prior, KL summed over
    latent coordinates and averaged over the batch."""
    if beta <= 0:
        raise ConfigError("beta must be > 0")
    diff = T.sub(x, xhat)
    recon = T.tmean(T.mul(diff, diff))
    kl_terms = T.mul(T.sub(T.add(T.mul(mu, mu), T.exp(log_var)), T.add(1.0, log_var)), 0.5)
    kl = T.tmean(T.tsum(kl_terms, axis=1))
    total = T.add(recon, T.mul(kl, beta))
    return total, recon, kl


def gan_losses(d_real_logits: Tensor, d_fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    """(generator, discriminator) non-saturating losses from raw logits."""
    disc = T.add(T.tmean(T.softplus(T.neg(d_real_logits))), T.tmean(T.softplus(d_fake_logits)))
    gen = T.tmean(T.softplus(T.neg(d_fake_logits)))
    return gen, disc


def r1_gradient_penalty(disc: Network, x_real: np.ndarray, gamma_r1: float,
                        rng: np.random.Generator | None = None,
                        logits_out: list | None = None) -> Tensor:
    """(gamma/2) E[ ||d D(x)/dx||^2 ] on the real batch, differentiable in the
    discriminator weights (double backprop through the score gradient)."""
    x = Tensor(np.asarray(x_real, dtype=np.float32), requires_grad=True)
    logits = disc.forward(x, training=True, rng=rng)
    if logits_out is not None:
        logits_out.append(logits)
    (gx,) = grad(T.tsum(logits), [x], create_graph=True)
    per_sample = T.tsum(T.mul(gx, gx), axis=tuple(range(1, len(x.shape))))
    return T.mul(T.tmean(per_sample), 0.5 * gamma_r1)


def perceptual_loss(feature_model, x: Tensor, xhat: Tensor) -> Tensor:
    """MSE between classifier hidden features of the input and reconstruction."""
    taps_r: dict[int, Tensor] = {feature_model.feature_layer: None}
    with T.no_grad():
        feature_model.net.forward(x, training=False, taps=taps_r)
    f_real = Tensor(taps_r[feature_model.feature_layer].data)
    taps_g: dict[int, Tensor] = {feature_model.feature_layer: None}
    feature_model.net.forward(xhat, training=False, taps=taps_g)
    f_fake = taps_g[feature_model.feature_layer]
    diff = T.sub(f_real, f_fake)
    return T.tmean(T.mul(diff, diff))


def vaegan_total_loss(x: Tensor, xhat: Tensor, mu: Tensor, log_var: Tensor,
                      d_fake_logits: Tensor | None,
                      features: tuple[Tensor, Tensor] | None,
                      weights: dict) -> tuple[Tensor, dict]:
    """Weighted sum of L1 + L2 reconstruction, KL, perceptual and adversarial
    terms; returns (total, components) with components as floats."""
    lam1 = float(weights.get("lambda_l1", 1.0))
    lam2 = float(weights.get("lambda_l2", 1.0))
    beta = float(weights.get("beta", 0.2))
    gamma = float(weights.get("gamma_perceptual", 0.1))
    if min(lam1, lam2, beta, gamma) < 0:
        raise ConfigError("loss weights must be >= 0")
    diff = T.sub(x, xhat)
    l1 = T.tmean(T.absolute(diff))
    l2 = T.tmean(T.mul(diff, diff))
    kl_terms = T.mul(T.sub(T.add(T.mul(mu, mu), T.exp(log_var)), T.add(1.0, log_var)), 0.5)
    kl = T.tmean(T.tsum(kl_terms, axis=1))
    total = T.add(T.add(T.mul(l1, lam1), T.mul(l2, lam2)), T.mul(kl, beta))
    comps = {"l1": float(l1.data), "l2": float(l2.data), "kl": float(kl.data)}
    if features is not None:
        f_r, f_g = features
        pdiff = T.sub(f_r, f_g)
        perc = T.tmean(T.mul(pdiff, pdiff))
        total = T.add(total, T.mul(perc, gamma))
        comps["perceptual"] = float(perc.data)
    else:
        comps["perceptual"] = 0.0
    if d_fake_logits is not None:
        adv = T.tmean(T.softplus(T.neg(d_fake_logits)))
        total = T.add(total, adv)
        comps["adversarial"] = float(adv.data)
    else:
        comps["adversarial"] = 0.0
    comps["total"] = float(total.data)
    return total, comps


# -- training trace -----------------------------------------------------------------------


@dataclass
class TrainingTrace:
    columns = ("epoch", "recon", "kl", "gen_loss", "disc_loss", "total", "val_mse", "val_total", "frd", "lr")
    rows: list[dict] = field(default_factory=list)

    def add(self, **kwargs) -> None:
        for v in kwargs.values():
            if isinstance(v, float) and not np.isfinite(v):
                raise NumericalError(f"non-finite trace entry: {kwargs}")
        self.rows.append(kwargs)

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(",".join(self.columns) + "\n")
            for row in self.rows:
                f.write(",".join(_csv_cell(row.get(c)) for c in self.columns) + "\n")

    def last(self, key: str):
        for row in reversed(self.rows):
            if key in row:
                return row[key]
        return None


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return f"{v:.10g}"


# -- training loops ------------------------------------------------------------------------


def _dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(ds.fields.tobytes())
    return h.hexdigest()[:16]


def _split(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = max(1, int(val_fraction * n))
    return order[n_val:], order[:n_val]


class _PlateauSchedule:
    """Validation-driven LR halving and early stopping with best-state restore."""

    def __init__(self, model: GenerativeModel, groups: list[AdamState], cfg: ModelConfig):
        self.model = model
        self.groups = groups
        self.cfg = cfg
        self.best = np.inf
        self.best_snap = None
        self.stale_lr = 0
        self.stale_stop = 0

    def update(self, val_loss: float) -> bool:
        """Returns True when training should stop."""
        if val_loss < self.best - self.cfg.min_delta:
            self.best = val_loss
            self.best_snap = {name: net.snapshot() for name, net in self.model.nets.items()}
            self.stale_lr = 0
            self.stale_stop = 0
            return False
        self.stale_lr += 1
        self.stale_stop += 1
        if self.stale_lr >= self.cfg.lr_patience:
            for g in self.groups:
                g.lr *= self.cfg.lr_factor
            self.stale_lr = 0
        return self.stale_stop >= self.cfg.patience

    def restore_best(self) -> None:
        if self.best_snap is not None:
            for name, snap in self.best_snap.items():
                self.model.nets[name].restore(snap)


def _vae_forward(model: GenerativeModel, x: Tensor, rng, training: bool,
                 eps: np.ndarray | None = None):
    h = model.nets["enc_trunk"].forward(x, training=training, rng=rng)
    mu = model.nets["enc_mu"].forward(h, training=training, rng=rng)
    lv = model.nets["enc_logvar"].forward(h, training=training, rng=rng)
    if eps is None:
        z = mu
    else:
        z = sample_latent(mu, lv, eps=eps)
    xhat = model.nets["decoder"].forward(z, training=training, rng=rng)
    return mu, lv, xhat


def _val_elbo(model: GenerativeModel, x_val: np.ndarray, beta: float) -> tuple[float, float]:
    """(val total, val mse) with deterministic z = mu."""
    total = 0.0
    mse = 0.0
    n = 0
    with T.no_grad():
        for sl in _batched(x_val.shape[0], 256):
            xb = Tensor(x_val[sl][:, None])
            mu, lv, xhat = _vae_forward(model, xb, None, training=False)
            tot, recon, kl = elbo_loss(xb, xhat, mu, lv, beta)
            b = x_val[sl].shape[0]
            total += float(tot.data) * b
            mse += float(recon.data) * b
            n += b
    return total / n, mse / n


def train(model: GenerativeModel, dataset: Dataset, val_fraction: float,
          seed: int, feature_model=None, log=None) -> tuple[GenerativeModel, TrainingTrace]:
    """Train a model on the dataset; returns the model (best weights restored
    where a validation signal exists) and its trace.  A zero-epoch or
    zero-iteration config returns the initial weights and an empty trace."""
    cfg = model.config
    model.dataset_fingerprint = _dataset_fingerprint(dataset)
    x_all = dataset.normalized()
    if x_all.shape[1:] != model.grid_hw:
        raise ConfigError(f"dataset grid {x_all.shape[1:]} != model grid {model.grid_hw}")
    model.bounds = tuple(dataset.bounds)
    if cfg.kind == "dcvae":
        return _train_dcvae(model, x_all, val_fraction, seed, log)
    if cfg.kind == "dcgan":
        return _train_dcgan(model, x_all, val_fraction, seed, feature_model, log)
    return _train_vaegan(model, x_all, val_fraction, seed, feature_model, log)


def _train_dcvae(model, x_all, val_fraction, seed, log):
    cfg = model.config
    trace = TrainingTrace()
    if cfg.epochs == 0:
        return model, trace
    rng = np.random.default_rng(seed)
    tr_idx, val_idx = _split(x_all.shape[0], val_fraction, rng)
    x_tr, x_val = x_all[tr_idx], x_all[val_idx]
    params = model.trainable("enc_dec")
    opt = AdamState(lr=cfg.lr, beta1=cfg.adam_betas[0], beta2=cfg.adam_betas[1], clip_norm=cfg.clip_norm)
    sched = _PlateauSchedule(model, [opt], cfg)
    steps = max(1, x_tr.shape[0] // cfg.batch)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(x_tr.shape[0])
        ep_recon = ep_kl = 0.0
        for s in range(steps):
            sel = perm[s * cfg.batch : (s + 1) * cfg.batch]
            xb = Tensor(x_tr[sel][:, None])
            eps = rng.normal(size=(sel.size, cfg.latent_dim)).astype(np.float32)
            for p in params.values():
                p.grad = None
            mu, lv, xhat = _vae_forward(model, xb, rng, training=True, eps=eps)
            total, recon, kl = elbo_loss(xb, xhat, mu, lv, cfg.beta)
            if not np.isfinite(total.data):
                raise NumericalError(f"dcvae loss diverged at epoch {epoch} (recon={recon.data}, kl={kl.data})")
            backward(total)
            adam_step(opt, params)
            ep_recon += float(recon.data)
            ep_kl += float(kl.data)
        val_total, val_mse = _val_elbo(model, x_val, cfg.beta)
        trace.add(epoch=epoch, recon=ep_recon / steps, kl=ep_kl / steps,
                  total=ep_recon / steps + cfg.beta * ep_kl / steps,
                  val_mse=val_mse, val_total=val_total, lr=opt.lr)
        if log:
            log(f"dcvae epoch {epoch}: recon {ep_recon/steps:.5f} kl {ep_kl/steps:.4f} val_mse {val_mse:.5f}")
        if sched.update(val_total):
            break
    sched.restore_best()
    return model, trace


def _train_dcgan(model, x_all, val_fraction, seed, feature_model, log):
    cfg = model.config
    trace = TrainingTrace()
    if cfg.iterations == 0:
        return model, trace
    rng = np.random.default_rng(seed)
    gen = model.nets["generator"]
    disc = model.nets["discriminator"]
    gp = model.trainable("generator")
    dp = model.trainable("discriminator")
    opt_g = AdamState(lr=cfg.lr, beta1=cfg.adam_betas_adv[0], beta2=cfg.adam_betas_adv[1], clip_norm=cfg.clip_norm)
    opt_d = AdamState(lr=cfg.lr_disc, beta1=cfg.adam_betas_adv[0], beta2=cfg.adam_betas_adv[1], clip_norm=cfg.clip_norm)
    best_frd = np.inf
    best_snap = None
    stale = 0
    frd_ref = x_all[rng.permutation(x_all.shape[0])[: min(256, x_all.shape[0])]]
    for it in range(cfg.iterations):
        sel = rng.integers(0, x_all.shape[0], size=cfg.batch)
        xr = x_all[sel][:, None]
        z = rng.normal(size=(cfg.batch, cfg.latent_dim)).astype(np.float32)
        # discriminator update (generator output held fixed)
        with T.no_grad():
            fake = gen.forward(Tensor(z), training=True, rng=rng).data
        for p in dp.values():
            p.grad = None
        if it % cfg.r1_interval == 0:
            logits_real_box: list = []
            r1 = r1_gradient_penalty(disc, xr, cfg.gamma_r1 * cfg.r1_interval, rng=rng,
                                     logits_out=logits_real_box)
            d_real = logits_real_box[0]
        else:
            r1 = None
            d_real = disc.forward(Tensor(xr), training=True, rng=rng)
        d_fake = disc.forward(Tensor(fake), training=True, rng=rng)
        _, d_loss = gan_losses(d_real, d_fake)
        d_total = T.add(d_loss, r1) if r1 is not None else d_loss
        if not np.isfinite(d_total.data):
            raise NumericalError(f"dcgan discriminator loss diverged at iteration {it}")
        backward(d_total)
        adam_step(opt_d, dp)
        # generator update
        z2 = rng.normal(size=(cfg.batch, cfg.latent_dim)).astype(np.float32)
        for p in list(gp.values()) + list(dp.values()):
            p.grad = None
        fake2 = gen.forward(Tensor(z2), training=True, rng=rng)
        d_fake2 = disc.forward(fake2, training=True, rng=rng)
        g_loss = T.tmean(T.softplus(T.neg(d_fake2)))
        if not np.isfinite(g_loss.data):
            raise NumericalError(f"dcgan generator loss diverged at iteration {it}")
        backward(g_loss)
        adam_step(opt_g, gp)

        if (it + 1) % cfg.eval_every == 0 or it == cfg.iterations - 1:
            row = {"epoch": it, "gen_loss": float(g_loss.data), "disc_loss": float(d_total.data),
                   "lr": opt_g.lr}
            if feature_model is not None:
                zs = rng.normal(size=(frd_ref.shape[0], cfg.latent_dim))
                samples = decode(model, zs)
                from .metrics import frechet_distance

                frd = frechet_distance(feature_model.features(samples), feature_model.features(frd_ref))
                row["frd"] = frd
                if frd < best_frd - cfg.min_delta:
                    best_frd = frd
                    best_snap = {name: net.snapshot() for name, net in model.nets.items()}
                    stale = 0
                else:
                    stale += 1
            trace.add(**row)
            if log:
                log(f"dcgan iter {it}: g {row['gen_loss']:.4f} d {row['disc_loss']:.4f} frd {row.get('frd', float('nan')):.4f}")
            if feature_model is not None and stale >= cfg.patience:
                break
    if best_snap is not None:
        for name, snap in best_snap.items():
            model.nets[name].restore(snap)
    return model, trace


def _train_vaegan(model, x_all, val_fraction, seed, feature_model, log):
    cfg = model.config
    if cfg.gamma_perceptual > 0 and feature_model is None:
        raise ConfigError("vaegan training with gamma_perceptual > 0 needs a feature model")
    trace = TrainingTrace()
    if cfg.epochs == 0:
        return model, trace
    rng = np.random.default_rng(seed)
    tr_idx, val_idx = _split(x_all.shape[0], val_fraction, rng)
    x_tr, x_val = x_all[tr_idx], x_all[val_idx]
    disc = model.nets["discriminator"]
    ed = model.trainable("enc_dec")
    dp = model.trainable("discriminator")
    opt_ed = AdamState(lr=cfg.lr, beta1=cfg.adam_betas[0], beta2=cfg.adam_betas[1], clip_norm=cfg.clip_norm)
    opt_d = AdamState(lr=cfg.lr_disc, beta1=cfg.adam_betas_adv[0], beta2=cfg.adam_betas_adv[1], clip_norm=cfg.clip_norm)
    sched = _PlateauSchedule(model, [opt_ed, opt_d], cfg)
    weights = {"lambda_l1": cfg.lambda_l1, "lambda_l2": cfg.lambda_l2,
               "beta": cfg.beta, "gamma_perceptual": cfg.gamma_perceptual}
    steps = max(1, x_tr.shape[0] // cfg.batch)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(x_tr.shape[0])
        ep = {"recon": 0.0, "kl": 0.0, "gen": 0.0, "disc": 0.0, "total": 0.0}
        for s in range(steps):
            sel = perm[s * cfg.batch : (s + 1) * cfg.batch]
            xb_np = x_tr[sel][:, None]
            eps = rng.normal(size=(sel.size, cfg.latent_dim)).astype(np.float32)
            # discriminator step on (real, reconstruction)
            with T.no_grad():
                xb_t = Tensor(xb_np)
                mu0, lv0, xhat0 = _vae_forward(model, xb_t, rng, training=True, eps=eps)
                fake = xhat0.data
            for p in dp.values():
                p.grad = None
            if s % cfg.r1_interval == 0:
                logits_box: list = []
                r1 = r1_gradient_penalty(disc, xb_np, cfg.gamma_r1 * cfg.r1_interval, rng=rng,
                                         logits_out=logits_box)
                d_real = logits_box[0]
            else:
                r1 = None
                d_real = disc.forward(Tensor(xb_np), training=True, rng=rng)
            d_fake = disc.forward(Tensor(fake), training=True, rng=rng)
            _, d_loss = gan_losses(d_real, d_fake)
            d_total = T.add(d_loss, r1) if r1 is not None else d_loss
            if not np.isfinite(d_total.data):
                raise NumericalError(f"vaegan discriminator diverged at epoch {epoch}")
            backward(d_total)
            adam_step(opt_d, dp)
            # encoder + decoder step
            for p in list(ed.values()) + list(dp.values()):
                p.grad = None
            if feature_model is not None:
                for p in feature_model.net.params.values():
                    p.grad = None
            xb = Tensor(xb_np)
            mu, lv, xhat = _vae_forward(model, xb, rng, training=True, eps=eps)
            d_fake2 = disc.forward(xhat, training=True, rng=rng)
            feats = None
            if feature_model is not None and cfg.gamma_perceptual > 0:
                taps: dict[int, Tensor] = {feature_model.feature_layer: None}
                with T.no_grad():
                    feature_model.net.forward(xb, training=False, taps=taps)
                f_real = Tensor(taps[feature_model.feature_layer].data)
                taps2: dict[int, Tensor] = {feature_model.feature_layer: None}
                feature_model.net.forward(xhat, training=False, taps=taps2)
                feats = (f_real, taps2[feature_model.feature_layer])
            total, comps = vaegan_total_loss(xb, xhat, mu, lv, d_fake2, feats, weights)
            if not np.isfinite(total.data):
                raise NumericalError(f"vaegan loss diverged at epoch {epoch}: {comps}")
            backward(total)
            adam_step(opt_ed, ed)
            ep["recon"] += comps["l2"]
            ep["kl"] += comps["kl"]
            ep["gen"] += comps["adversarial"]
            ep["disc"] += float(d_total.data)
            ep["total"] += comps["total"]
        val_total, val_mse = _val_elbo(model, x_val, cfg.beta)
        trace.add(epoch=epoch, recon=ep["recon"] / steps, kl=ep["kl"] / steps,
                  gen_loss=ep["gen"] / steps, disc_loss=ep["disc"] / steps,
                  total=ep["total"] / steps, val_mse=val_mse, val_total=val_total, lr=opt_ed.lr)
        if log:
            log(f"vaegan epoch {epoch}: recon {ep['recon']/steps:.5f} kl {ep['kl']/steps:.4f} "
                f"disc {ep['disc']/steps:.4f} val_mse {val_mse:.5f}")
        if sched.update(val_total):
            break
    sched.restore_best()
    return model, trace


# -- model bundle io --------------------------------------------------------------------------


def save_model(model: GenerativeModel, directory: str | Path, trace: TrainingTrace | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in model.nets.items():
        save_network(net, directory / name)
    manifest = {
        "kind": model.kind,
        "grid_hw": list(model.grid_hw),
        "bounds": list(model.bounds),
        "dataset_fingerprint": model.dataset_fingerprint,
        "config": asdict(model.config),
    }
    (directory / "model.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if trace is not None:
        trace.to_csv(directory / "training_trace.csv")
    return directory


def load_model(directory: str | Path) -> GenerativeModel:
    directory = Path(directory)
    manifest_path = directory / "model.json"
    if not manifest_path.exists():
        raise ConfigError(f"no model manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg_dict = manifest["config"]
    cfg_dict["adam_betas"] = tuple(cfg_dict["adam_betas"])
    cfg_dict["adam_betas_adv"] = tuple(cfg_dict["adam_betas_adv"])
    cfg = ModelConfig(**cfg_dict)
    kind = manifest["kind"]
    names = {
        "dcgan": ["generator", "discriminator"],
        "dcvae": ["enc_trunk", "enc_mu", "enc_logvar", "decoder"],
        "vaegan": ["enc_trunk", "enc_mu", "enc_logvar", "decoder", "discriminator"],
    }[kind]
    nets = {}
    for name in names:
        nets[name], _ = load_network(directory / name)
    model = GenerativeModel(kind, cfg, nets, tuple(manifest["grid_hw"]), tuple(manifest["bounds"]),
                            manifest.get("dataset_fingerprint", ""))
    return model
