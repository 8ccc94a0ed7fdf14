"""Diffusion autoencoder: semantic encoder, latent-conditioned denoiser, DDIM decoding.

Signal levels follow the cumulative convention: ``alpha_bar(t)`` is the
product of ``1 - beta_s`` for ``s <= t``, with ``alpha_bar(0) = 1``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from . import tensor as T
from .nn import Adam, Conv2d, GroupNorm, Linear, Module
from .rng import make_rng
from .validation import check_images, check_latents


class SamplingError(RuntimeError):
    pass


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas_cum: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    def alpha_bar(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 0..{self.T}: {t}")
        full = np.concatenate([[1.0], self.alphas_cum])
        return full[t]


def make_schedule(T_steps, beta_min, beta_max):
    """Linearly spaced betas and their cumulative signal levels (float64)."""
    if T_steps < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, T_steps, dtype=np.float64)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def q_sample(x0, t, eps, schedule):
    """Noised image x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` may be per-sample."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"t must lie in 1..{schedule.T}")
    ab = schedule.alpha_bar(t)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def ddim_update(x_t, eps_hat, ab_t, ab_prev):
    """One deterministic DDIM update given a noise prediction."""
    x0_pred = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_pred + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_step(x_t, t, z, schedule, denoiser, t_prev=None):
    """Map x_t to x_{t_prev} (default t-1) using the denoiser's noise estimate."""
    t_prev = t - 1 if t_prev is None else t_prev
    if t < 1 or t > schedule.T:
        raise ValueError(f"ddim_step needs 1 <= t <= {schedule.T}, got {t}")
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev must satisfy 0 <= t_prev < t, got {t_prev}")
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(denoiser(x_t, t, z))
    if not np.all(np.isfinite(eps_hat)):
        raise SamplingError(f"denoiser returned non-finite values at t={t}")
    out = ddim_update(x_t.astype(np.float64), eps_hat.astype(np.float64),
                      schedule.alpha_bar(t), schedule.alpha_bar(t_prev))
    return out.astype(x_t.dtype)


def timestep_sequence(T_steps, stride):
    if stride < 1:
        raise ValueError("stride must be >= 1")
    seq = list(range(T_steps, 0, -stride))
    if seq and seq[-1] != 1:
        seq.append(1)
    return seq


def reconstruct(z, x_T, schedule, denoiser, stride=1, timesteps=None):
    """Run DDIM from x_T down to x_0 over a strided timestep sequence. Unclamped."""
    seq = timestep_sequence(schedule.T, stride) if timesteps is None else list(timesteps)
    if not seq:
        raise SamplingError("empty timestep sequence")
    x = np.asarray(x_T)
    for i, t in enumerate(seq):
        t_prev = seq[i + 1] if i + 1 < len(seq) else 0
        x = ddim_step(x, t, z, schedule, denoiser, t_prev)
    return x


def invert(x0, z, schedule, denoiser, stride=1):
    """Deterministic DDIM encoding of x_0 to x_T (the DDIM update run upwards).

    Each step uses the noise estimate at the destination timestep on the
    current image, the usual first-order approximation.
    """
    seq = timestep_sequence(schedule.T, stride)[::-1]
    x = np.asarray(x0)
    prev = 0
    for t in seq:
        eps_hat = np.asarray(denoiser(x, t, z), dtype=np.float64)
        if not np.all(np.isfinite(eps_hat)):
            raise SamplingError(f"denoiser returned non-finite values at t={t}")
        x = ddim_update(x.astype(np.float64), eps_hat, schedule.alpha_bar(prev), schedule.alpha_bar(t)).astype(x.dtype)
        prev = t
    return x


# -- networks ----------------------------------------------------------------

def timestep_features(t, dim):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class Encoder(Module):
    def __init__(self, rng, size=16, latent_dim=32, width=16):
        if size % 4:
            raise ValueError("image size must be divisible by 4")
        self.size = size
        self.c1 = Conv2d(rng, 1, width)
        self.c2 = Conv2d(rng, width, 2 * width, stride=2)
        self.c3 = Conv2d(rng, 2 * width, 4 * width, stride=2)
        self.proj = Linear(rng, 4 * width * (size // 4) ** 2, latent_dim)

    def __call__(self, x):
        h = T.silu(self.c1(x))
        h = T.silu(self.c2(h))
        h = T.silu(self.c3(h))
        return self.proj(h.reshape(h.shape[0], -1))


class ResBlock(Module):
    def __init__(self, rng, ch, emb_dim, groups=8):
        self.n1 = GroupNorm(groups, ch)
        self.conv1 = Conv2d(rng, ch, ch)
        self.n2 = GroupNorm(groups, ch)
        self.film = Linear(rng, emb_dim, 2 * ch)
        self.conv2 = Conv2d(rng, ch, ch)
        self.ch = ch

    def __call__(self, x, emb):
        h = self.conv1(T.silu(self.n1(x)))
        ss = self.film(emb)
        scale = ss[:, :self.ch].reshape(-1, self.ch, 1, 1)
        shift = ss[:, self.ch:].reshape(-1, self.ch, 1, 1)
        h = self.n2(h) * (scale + 1.0) + shift
        return x + self.conv2(T.silu(h))


class Denoiser(Module):
    """Two-level U-Net predicting the noise; z is projected and added to the time embedding."""

    def __init__(self, rng, latent_dim=32, width=32, emb_dim=64):
        self.emb_dim = emb_dim
        self.t1 = Linear(rng, emb_dim, emb_dim)
        self.t2 = Linear(rng, emb_dim, emb_dim)
        self.zproj = Linear(rng, latent_dim, emb_dim)
        w2 = 2 * width
        self.inc = Conv2d(rng, 1, width)
        self.down1 = ResBlock(rng, width, emb_dim)
        self.ds1 = Conv2d(rng, width, w2, stride=2)
        self.down2 = ResBlock(rng, w2, emb_dim)
        self.ds2 = Conv2d(rng, w2, w2, stride=2)
        self.mid = ResBlock(rng, w2, emb_dim)
        self.us2 = Conv2d(rng, w2, w2)
        self.up2 = ResBlock(rng, w2, emb_dim)
        self.us1 = Conv2d(rng, w2, width)
        self.up1 = ResBlock(rng, width, emb_dim)
        self.nout = GroupNorm(8, width)
        self.outc = Conv2d(rng, width, 1)

    def __call__(self, x, t, z):
        tf = T.Tensor(timestep_features(t, self.emb_dim))
        if tf.shape[0] == 1 and x.shape[0] > 1:
            tf = T.Tensor(np.repeat(tf.data, x.shape[0], axis=0))
        emb = T.silu(self.t2(T.silu(self.t1(tf))) + self.zproj(z))
        h = self.inc(x)
        s1 = self.down1(h, emb)
        s2 = self.down2(self.ds1(s1), emb)
        h = self.mid(self.ds2(s2), emb)
        h = self.up2(self.us2(T.upsample2x(h)) + s2, emb)
        h = self.up1(self.us1(T.upsample2x(h)) + s1, emb)
        return self.outc(T.silu(self.nout(h)))


def _as_nchw(x):
    x = np.asarray(x, dtype=np.float32)
    return x[:, None] if x.ndim == 3 else x


def diffusion_loss(x0, t, eps, encoder, denoiser, schedule):
    """Mean |denoiser(x_t, t, encoder(x0)) - eps| over every pixel of the batch."""
    x0 = _as_nchw(x0)
    xt = q_sample(x0, t, eps, schedule)
    z = encoder(T.Tensor(x0))
    return T.l1_loss(denoiser(T.Tensor(xt), t, z), eps)


def train_step(x0, encoder, denoiser, schedule, adam, rng):
    """One tandem update of encoder and denoiser on the L1 noise-prediction loss."""
    x0 = _as_nchw(x0)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    loss = diffusion_loss(x0, t, eps, encoder, denoiser, schedule)
    value = float(loss.item())
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite diffusion loss at optimizer step {adam.t + 1}")
    T.backward(loss)
    adam.step()
    return value


class DiffusionAutoencoder(TransformerMixin, BaseEstimator):
    """Encoder/denoiser pair trained jointly; ``transform`` gives semantic latents.

    ``inverse_transform`` decodes latents with deterministic DDIM from a
    stochastic code x_T (drawn from ``random_state`` if not supplied).
    """

    def __init__(self, image_size=16, latent_dim=32, encoder_width=16, base_width=32,
                 n_timesteps=100, beta_min=1e-3, beta_max=0.13, sampling_stride=5,
                 learning_rate=2e-3, batch_size=64, n_steps=1500, random_state=0, verbose=False):
        self.image_size = image_size
        self.latent_dim = latent_dim
        self.encoder_width = encoder_width
        self.base_width = base_width
        self.n_timesteps = n_timesteps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.sampling_stride = sampling_stride
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.random_state = random_state
        self.verbose = verbose

    def _build(self):
        rng = make_rng(self.random_state, "init")
        self.encoder_ = Encoder(rng, self.image_size, self.latent_dim, self.encoder_width)
        self.denoiser_ = Denoiser(rng, self.latent_dim, self.base_width)
        # float32 betas, exactly what a checkpoint stores
        betas = make_schedule(self.n_timesteps, self.beta_min, self.beta_max).betas
        self.schedule_ = make_schedule_from_betas(betas.astype(np.float32))

    def fit(self, X, y=None):
        X = check_images(X, self.image_size)
        self._build()
        params = self.encoder_.parameters() + self.denoiser_.parameters()
        adam = Adam(params, lr=self.learning_rate)
        rng = make_rng(self.random_state, "train")
        self.loss_history_ = []
        start = time.time()
        for step in range(self.n_steps):
            idx = rng.choice(len(X), size=min(self.batch_size, len(X)), replace=False)
            loss = train_step(X[idx], self.encoder_, self.denoiser_, self.schedule_, adam, rng)
            self.loss_history_.append(loss)
            if self.verbose and (step + 1) % 100 == 0:
                recent = np.mean(self.loss_history_[-100:])
                print(f"[ae] step {step + 1}/{self.n_steps} loss {recent:.4f} ({time.time() - start:.0f}s)")
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        X = check_images(X, self.image_size)
        out = []
        with T.no_grad():
            for i in range(0, len(X), 256):
                out.append(self.encoder_(T.Tensor(X[i:i + 256, None])).data)
        return np.concatenate(out).astype(np.float32)

    def denoise(self, x_t, t, z):
        with T.no_grad():
            return self.denoiser_(T.Tensor(_as_nchw(x_t)), t, T.Tensor(np.asarray(z, dtype=np.float32))).data

    def stochastic_code(self, n, seed=None):
        """Image-shaped standard normal noise x_T for ``n`` decodes."""
        seed = self.random_state if seed is None else seed
        rng = make_rng(seed, "x_T")
        return rng.standard_normal((n, 1, self.image_size, self.image_size)).astype(np.float32)

    def inverse_transform(self, Z, x_T=None, seed=None):
        check_is_fitted(self, "encoder_")
        Z = check_latents(Z, self.latent_dim)
        if x_T is None:
            x_T = self.stochastic_code(len(Z), seed)
        else:
            x_T = _as_nchw(x_T)
            if x_T.shape != (len(Z), 1, self.image_size, self.image_size):
                raise T.ShapeError("inverse_transform x_T", x_T.shape, (len(Z), 1, self.image_size, self.image_size))
        x0 = reconstruct(Z, x_T, self.schedule_, self.denoise, self.sampling_stride)
        return x0[:, 0]

    def invert(self, X, Z=None):
        """Stochastic codes x_T recovered from images by deterministic DDIM encoding."""
        check_is_fitted(self, "encoder_")
        X = check_images(X, self.image_size)
        Z = self.transform(X) if Z is None else check_latents(Z, self.latent_dim)
        return invert(X[:, None], Z, self.schedule_, self.denoise, self.sampling_stride)

    def reconstruction_error(self, X, seed=None):
        """Mean absolute error between ``X`` and its decoded reconstruction."""
        X = check_images(X, self.image_size)
        rec = self.inverse_transform(self.transform(X), seed=seed)
        return float(np.mean(np.abs(rec - X)))

    # -- persistence --

    def _meta(self):
        return {k: np.array([float(getattr(self, k))], dtype=np.float32)
                for k in ("image_size", "latent_dim", "encoder_width", "base_width",
                          "n_timesteps", "sampling_stride")}

    def save(self, path):
        check_is_fitted(self, "encoder_")
        rec = {f"config.{k}": v for k, v in self._meta().items()}
        rec["schedule.betas"] = self.schedule_.betas.astype(np.float32)
        rec["schedule.beta_min"] = np.array([self.beta_min], dtype=np.float32)
        rec["schedule.beta_max"] = np.array([self.beta_max], dtype=np.float32)
        for k, p in self.encoder_.named_parameters("encoder."):
            rec[k] = p.data
        for k, p in self.denoiser_.named_parameters("denoiser."):
            rec[k] = p.data
        checkpoint.save(path, rec)

    @classmethod
    def load(cls, path):
        rec = checkpoint.load(path)
        kw = {k: int(round(float(rec[f"config.{k}"][0]))) for k in
              ("image_size", "latent_dim", "encoder_width", "base_width", "n_timesteps", "sampling_stride")}
        model = cls(beta_min=float(rec["schedule.beta_min"][0]), beta_max=float(rec["schedule.beta_max"][0]), **kw)
        model._build()
        model.schedule_ = make_schedule_from_betas(rec["schedule.betas"])
        model.encoder_.load_state_dict(rec, "encoder.")
        model.denoiser_.load_state_dict(rec, "denoiser.")
        return model


def make_schedule_from_betas(betas):
    betas = np.asarray(betas, dtype=np.float64)
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must lie in (0, 1)")
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))
