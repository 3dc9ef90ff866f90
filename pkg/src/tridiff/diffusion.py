"""Denoising-diffusion engine: schedule, corruption, training, sampling.

The forward process is the standard variance-preserving chain with a
linear beta schedule (defaults T=100, 1e-4 to 0.02). Noising uses the
closed form z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps. Sampling is
ancestral with sigma_t^2 = beta_t and no noise on the final step.

Training pairs each target latent with two views of its condition
sample: the base network is conditioned on the encoding of a
half-masked payload, the control branch on the encoding of the full
payload. Condition encoders are frozen throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .control import ControlBranch, compound_denoise, denoise
from .data import (AUDIO_LEN, IMAGE_SHAPE, TEXT_EMBED_TABLE, TEXT_LEN,
                   ModalitySample)
from .denoiser import LATENT_SHAPES, ConditionalDenoiser
from .encoders import FrozenParameterError, encode_batch, mask_payload
from .optim import Adam
from .tensor import Tensor

DEFAULT_T = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
CONDITION_MASK_RATIO = 0.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta schedule plus derived alpha tables, float64, 1-indexed by t."""
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    # Explicit running product so abar[t] == abar[t-1] * alpha[t] holds
    # exactly, not just up to reassociation.
    abars = np.empty(T, dtype=np.float64)
    acc = np.float64(1.0)
    for i in range(T):
        acc = acc * alphas[i]
        abars[i] = acc
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=abars)


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray,
             schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form corruption of z0 at step t (1-based); no internal RNG."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}], got {t}")
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise T.ShapeError(f"q_sample: z0 {z0.shape} vs eps {eps.shape}")
    ab = schedule.alpha_bars[t - 1]
    coef_z = np.asarray(np.sqrt(ab), dtype=z0.dtype)
    coef_e = np.asarray(np.sqrt(1.0 - ab), dtype=z0.dtype)
    return coef_z * z0 + coef_e * eps


# ---------------------------------------------------------------------------
# latent <-> payload
# ---------------------------------------------------------------------------

# Denoised latents must sit near unit variance against the N(0,1) forward
# noise, or almost the whole training signal is spent on noise prediction
# and the condition pathway never gets learned. Payloads are much smaller
# than that, so the codec applies a fixed per-modality gain. Powers of two
# keep the round trip exact in float32.
LATENT_SCALE = {"image": 8.0, "audio": 2.0, "text": 2.0}


def payload_to_latent(sample: ModalitySample) -> np.ndarray:
    """Payload -> (L, 4) float32 latent grid, scaled by the modality gain;
    text goes through the fixed token embedding table."""
    m, p = sample.modality, sample.payload
    if m == "image":
        grid = p.reshape(LATENT_SHAPES["image"]).astype(np.float32)
    elif m == "audio":
        grid = p.reshape(LATENT_SHAPES["audio"]).astype(np.float32)
    elif m == "text":
        grid = TEXT_EMBED_TABLE[p.astype(np.int64)].astype(np.float32)
    else:
        raise ValueError(f"unknown modality '{m}'")
    return grid * np.float32(LATENT_SCALE[m])


def decode_output(z0: np.ndarray, modality: str) -> ModalitySample:
    """Latent grid -> payload. The modality gain comes off first; continuous
    payloads then clamp to [-1, 1], text reads out the nearest token
    embedding per grid row."""
    z0 = np.asarray(z0)
    want = LATENT_SHAPES.get(modality)
    if want is None:
        raise ValueError(f"unknown modality '{modality}'")
    if z0.shape != want:
        raise T.ShapeError(f"latent shape {z0.shape} != {want}")
    z0 = z0 / np.float32(LATENT_SCALE[modality])
    if modality == "image":
        return ModalitySample("image", np.clip(z0, -1.0, 1.0)
                              .reshape(IMAGE_SHAPE).astype(np.float32))
    if modality == "audio":
        return ModalitySample("audio", np.clip(z0, -1.0, 1.0)
                              .reshape(AUDIO_LEN).astype(np.float32))
    d = z0[:, None, :] - TEXT_EMBED_TABLE[None, :, :]
    ids = np.argmin((d * d).sum(axis=-1), axis=1).astype(np.int32)
    return ModalitySample("text", ids)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainItem:
    """One training example: target latent + its condition sample."""
    z0: np.ndarray             # (L, C) latent of the output modality
    condition: ModalitySample  # full condition payload (any modality)


def noise_prediction_loss(eps_hat: Tensor, eps: np.ndarray) -> Tensor:
    """Mean squared error between predicted and true noise."""
    diff = T.sub(eps_hat, T.const(eps, dtype=eps_hat.dtype))
    return T.tmean(T.mul(diff, diff))


def training_step(base: ConditionalDenoiser, ctrl: ControlBranch,
                  encoders: dict, batch: list[TrainItem],
                  schedule: NoiseSchedule, optim: Adam,
                  rng: np.random.Generator, scale: float, mode: str = "sum",
                  denoise_fn=None) -> float:
    """One denoising update over a batch; returns the scalar loss.

    Each item draws its own uniform t in [1, T] and Gaussian noise. The
    base network is conditioned on the encoding of a freshly half-masked
    condition payload, the control branch on the full payload's
    encoding. Encoders must be frozen; a trainable encoder parameter or
    an optimizer that owns one raises FrozenParameterError.
    """
    if not batch:
        raise ValueError("training_step: empty batch")
    enc_params = {id(p) for e in encoders.values() for p in e.parameters()}
    for e in encoders.values():
        for p in e.parameters():
            if p.requires_grad:
                raise FrozenParameterError(
                    "condition encoders must be frozen during diffusion training")
    for p in optim.params:
        if id(p) in enc_params:
            raise FrozenParameterError("optimizer owns condition-encoder parameters")

    cfg = base.cfg
    B = len(batch)
    t_arr = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal((B, cfg.latent_len, cfg.channels)).astype(np.float32)
    zt = np.empty_like(eps)
    for i, item in enumerate(batch):
        if item.z0.shape != (cfg.latent_len, cfg.channels):
            raise T.ShapeError(
                f"z0 shape {item.z0.shape} != ({cfg.latent_len}, {cfg.channels})")
        zt[i] = q_sample(item.z0.astype(np.float32), int(t_arr[i]), eps[i], schedule)

    masked = [mask_payload(item.condition, CONDITION_MASK_RATIO, rng)[0]
              for item in batch]
    full = [item.condition for item in batch]
    cond_modality = full[0].modality
    for s in full:
        if s.modality != cond_modality:
            raise ValueError("training batch must share one condition modality")
    enc = encoders[cond_modality]
    with T.no_grad():
        c_masked = encode_batch(enc, masked).data.copy()
        c_full = encode_batch(enc, full).data.copy()

    zt_rows = T.const(zt.reshape(B * cfg.latent_len, cfg.channels), dtype=np.float32)
    if denoise_fn is not None:
        eps_hat = denoise_fn(zt_rows, t_arr, c_masked, c_full)
    else:
        eps_hat = denoise(base, ctrl, zt_rows, t_arr,
                          T.const(c_masked, dtype=np.float32),
                          [T.const(c_full, dtype=np.float32)],
                          scale, mode, batch=B)
    loss = noise_prediction_loss(eps_hat, eps.reshape(B * cfg.latent_len, cfg.channels))
    grads = T.backward(loss, optim.params)
    optim.step(grads)
    return loss.item()


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def ddpm_sample_batch(base: ConditionalDenoiser, ctrl: ControlBranch | None,
                      condition_sets: list[np.ndarray], schedule: NoiseSchedule,
                      rng: np.random.Generator, n: int, weights=None,
                      scale: float = 0.1, mode: str = "sum",
                      z_init: np.ndarray | None = None) -> np.ndarray:
    """Ancestral sampling for n latents under shared condition modalities.

    `condition_sets` holds one (n, d) matrix per conditioning modality.
    Noise draw order is fixed (z_T first, then one draw per step except
    the last), so a trajectory is a pure function of (parameters,
    conditions, rng state, z_init). sigma_t^2 = beta_t.
    """
    cfg = base.cfg
    shape = (n, cfg.latent_len, cfg.channels)
    if z_init is None:
        z = rng.standard_normal(shape).astype(np.float32)
    else:
        if z_init.shape != shape:
            raise T.ShapeError(f"z_init shape {z_init.shape} != {shape}")
        z = z_init.astype(np.float32).copy()
    with T.no_grad():
        for t in range(schedule.T, 0, -1):
            zt_rows = T.const(z.reshape(n * cfg.latent_len, cfg.channels),
                              dtype=np.float32)
            t_arr = np.full(n, t, dtype=np.int64)
            eps_hat = compound_denoise(base, ctrl, zt_rows, t_arr,
                                       condition_sets, weights, scale, mode,
                                       batch=n).data
            eps_hat = eps_hat.reshape(shape)
            beta = schedule.betas[t - 1]
            alpha = schedule.alphas[t - 1]
            abar = schedule.alpha_bars[t - 1]
            coef = np.float32(beta / np.sqrt(1.0 - abar))
            mean = (z - coef * eps_hat) / np.float32(np.sqrt(alpha))
            if t > 1:
                noise = rng.standard_normal(shape).astype(np.float32)
                z = mean + np.float32(np.sqrt(beta)) * noise
            else:
                z = mean
    return z


def ddpm_sample(base: ConditionalDenoiser, ctrl: ControlBranch | None,
                conditions: list, schedule: NoiseSchedule,
                rng: np.random.Generator, weights=None, scale: float = 0.1,
                mode: str = "sum", z_init: np.ndarray | None = None) -> np.ndarray:
    """Single-latent convenience wrapper: conditions are LatentConditions."""
    sets = [np.asarray(c.v, dtype=np.float32).reshape(1, -1) for c in conditions]
    zi = None if z_init is None else z_init[None, ...]
    out = ddpm_sample_batch(base, ctrl, sets, schedule, rng, 1, weights,
                            scale, mode, zi)
    return out[0]
