"""Alignment encoders: one latent space for image, audio and text.

Each modality gets a small transformer encoder (tokenize/patchify, two
single-head attention + MLP blocks, mean pool, fixed feature whitening,
projection) whose output is a unit-norm 32-d condition latent. The three encoders are aligned
contrastively: text and image train jointly from scratch, then the text
encoder freezes and audio fine-tunes against it, which bridges audio to
image through the shared text anchor without any audio-image pairs.

Image and audio encoders can be warm-started by masked-autoencoder
pretraining on unpaired data (mask half the patches, reconstruct only
the masked ones).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .data import (AUDIO_LEN, BOS, EMPTY, EOS, IMAGE_SHAPE, N_FACTORS, PAD,
                   TEXT_LEN, VOCAB_SIZE, ModalitySample)
from .optim import Adam
from .tensor import Tensor

LATENT_DIM = 32
MODEL_WIDTH = 32
MLP_WIDTH = 64
N_BLOCKS = 2
TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 1e-3, 10.0

# Token geometry per modality: (sequence length, token feature dim).
TOKEN_SHAPES = {
    "image": (16, 16),   # 4x4 grid of 4x4 pixel patches
    "audio": (16, 4),    # 16 frames of 4 samples
    "text": (TEXT_LEN, VOCAB_SIZE),  # one-hot rows
}

# Reconstruction target dim for the masked autoencoder.
MAE_TARGET_DIM = {"image": 16, "audio": 4, "text": VOCAB_SIZE}

MASK_FILL_VALUE = 0.0  # payload-space stand-in for the mask token


class FrozenParameterError(RuntimeError):
    """An update would touch parameters that must stay frozen."""


@dataclass
class LatentCondition:
    """Unit-norm condition vector plus the modality it came from."""
    v: np.ndarray
    source_modality: str


def tokens_of(sample: ModalitySample) -> np.ndarray:
    """Payload -> (T, token_dim) float32 token matrix (pure numpy, no grad)."""
    m = sample.modality
    p = sample.payload
    if m == "image":
        if p.shape != IMAGE_SHAPE:
            raise T.ShapeError(f"image payload shape {p.shape} != {IMAGE_SHAPE}")
        # 4x4 patch grid, each patch flattened row-major.
        t = p.reshape(4, 4, 4, 4).transpose(0, 2, 1, 3).reshape(16, 16)
        return t.astype(np.float32)
    if m == "audio":
        if p.shape != (AUDIO_LEN,):
            raise T.ShapeError(f"audio payload shape {p.shape} != ({AUDIO_LEN},)")
        return p.reshape(16, 4).astype(np.float32)
    if m == "text":
        if p.shape != (TEXT_LEN,):
            raise T.ShapeError(f"text payload shape {p.shape} != ({TEXT_LEN},)")
        oh = np.zeros((TEXT_LEN, VOCAB_SIZE), dtype=np.float32)
        oh[np.arange(TEXT_LEN), p.astype(np.int64)] = 1.0
        return oh
    raise ValueError(f"unknown modality '{m}'")


class AttentionBlock(nn.Module):
    """Pre-norm single-head self-attention followed by a SiLU MLP."""

    def __init__(self, width: int, mlp_width: int, rng: np.random.Generator):
        self.ln1 = nn.LayerNorm(width)
        self.wq = nn.Linear(width, width, rng)
        self.wk = nn.Linear(width, width, rng)
        self.wv = nn.Linear(width, width, rng)
        self.wo = nn.Linear(width, width, rng)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.MLP(width, mlp_width, width, rng)
        self._scale = 1.0 / np.sqrt(width)

    def __call__(self, x: Tensor, batch: int, length: int) -> Tensor:
        h = self.ln1(x)
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        scores = T.mul(T.matmul(q, T.transpose(k)), T.const(self._scale, dtype=x.dtype))
        scores = T.add(scores, nn.block_attention_mask(batch, length, x.dtype))
        attn = T.matmul(T.softmax(scores), v)
        x = T.add(x, self.wo(attn))
        return T.add(x, self.mlp(self.ln2(x)))


class AlignmentEncoder(nn.Module):
    """Tokens -> embeddings -> 2 attention blocks -> pooled unit latent."""

    def __init__(self, modality: str, rng: np.random.Generator,
                 width: int = MODEL_WIDTH, mlp_width: int = MLP_WIDTH,
                 latent_dim: int = LATENT_DIM):
        if modality not in TOKEN_SHAPES:
            raise ValueError(f"unknown modality '{modality}'")
        length, token_dim = TOKEN_SHAPES[modality]
        self.embed = nn.Linear(token_dim, width, rng, bias=(modality != "text"))
        self.pos = nn.param((length, width), rng, scale=0.02)
        self.blocks = [AttentionBlock(width, mlp_width, rng) for _ in range(N_BLOCKS)]
        self.proj = nn.Linear(width, latent_dim, rng)
        # Fixed feature-whitening affine applied between pooling and the
        # projection. Identity until calibrate_whitening() is called; kept
        # out of parameters() on purpose, it never receives gradients.
        self._wh_mu = np.zeros(width, dtype=np.float32)
        self._wh_w = np.eye(width, dtype=np.float32)
        self._modality = modality
        self._length = length
        self._width = width

    @property
    def modality(self) -> str:
        return self._modality

    def backbone(self, token_rows: Tensor, batch: int) -> Tensor:
        """(B*T, token_dim) -> (B*T, width) after embedding and blocks."""
        h = self.embed(token_rows)
        h = T.add(h, _tile_pos(self.pos, batch))
        for blk in self.blocks:
            h = blk(h, batch, self._length)
        return h

    def head(self, h: Tensor, batch: int) -> Tensor:
        """(B*T, width) -> (B, latent_dim) unit rows."""
        pooled = nn.pool_per_sample(h, batch, self._length)
        mu = T.const(np.tile(self._wh_mu, (batch, 1)), dtype=pooled.dtype)
        white = T.matmul(T.sub(pooled, mu), T.const(self._wh_w, dtype=pooled.dtype))
        return T.l2_normalize(self.proj(white))

    def state_dict(self) -> dict[str, np.ndarray]:
        d = super().state_dict()
        d["whiten.mu"] = self._wh_mu
        d["whiten.w"] = self._wh_w
        return d

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        arrays = dict(arrays)
        try:
            mu = arrays.pop("whiten.mu")
            w = arrays.pop("whiten.w")
        except KeyError as e:
            raise KeyError(f"state missing whitening buffer {e}") from None
        super().load_state_dict(arrays)
        self._wh_mu = np.asarray(mu, dtype=np.float32).reshape(self._width).copy()
        self._wh_w = np.asarray(w, dtype=np.float32).reshape(self._width, self._width).copy()


def _tile_pos(pos: Tensor, batch: int) -> Tensor:
    length = pos.shape[0]

    def build():
        return np.tile(np.eye(length), (batch, 1))

    key = ("postile", batch, length, pos.dtype)
    return T.matmul(nn._cached(key, build), pos)


def encode_batch(enc: AlignmentEncoder, samples) -> Tensor:
    """Encode a list of same-modality samples into an (N, d) latent matrix."""
    samples = list(samples)
    if not samples:
        raise ValueError("encode_batch: empty sample list")
    for s in samples:
        if s.modality != enc.modality:
            raise ValueError(f"encoder for '{enc.modality}' got a '{s.modality}' sample")
    rows = np.concatenate([tokens_of(s) for s in samples], axis=0)
    h = enc.backbone(T.const(rows, dtype=np.float32), len(samples))
    return enc.head(h, len(samples))


def encode(enc: AlignmentEncoder, sample: ModalitySample) -> LatentCondition:
    """Single-sample encoding; pure function of (parameters, payload)."""
    with T.no_grad():
        z = encode_batch(enc, [sample])
    return LatentCondition(v=z.data[0].copy(), source_modality=sample.modality)


def pooled_features(enc: AlignmentEncoder, samples, chunk: int = 256) -> np.ndarray:
    """Mean-pooled backbone features, (N, width) float64, no gradients."""
    samples = list(samples)
    out = []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        with T.no_grad():
            rows = np.concatenate([tokens_of(s) for s in part], axis=0)
            h = enc.backbone(T.const(rows, dtype=np.float32), len(part))
            pooled = nn.pool_per_sample(h, len(part), enc._length)
        out.append(pooled.data.astype(np.float64))
    return np.concatenate(out, axis=0)


WHITEN_EPS = 1e-3


def calibrate_whitening(enc: AlignmentEncoder, samples,
                        eps: float = WHITEN_EPS) -> None:
    """Fit the encoder's fixed whitening affine to a feature sample.

    Pools backbone features over `samples` and stores the affine map that
    centers them and equalizes variance along the covariance eigenbasis
    (eigenvalues floored at eps times the largest, so near-null directions
    are damped instead of amplified). The map stays frozen afterwards.

    Without this step the match between a fresh head and an already
    structured latent space lives at weight magnitudes a short fine-tune
    cannot reach; whitening moves it next to the init.
    """
    feats = pooled_features(enc, samples)
    if len(feats) < 2:
        raise ValueError("calibrate_whitening needs at least 2 samples")
    mu = feats.mean(axis=0)
    cov = np.cov(feats - mu, rowvar=False)
    lam, vec = np.linalg.eigh(cov)
    scale = 1.0 / np.sqrt(lam + eps * lam.max())
    w = vec @ np.diag(scale) @ vec.T
    enc._wh_mu = mu.astype(np.float32)
    enc._wh_w = w.astype(np.float32)


def make_encoders(rng: np.random.Generator) -> dict[str, AlignmentEncoder]:
    return {m: AlignmentEncoder(m, rng) for m in ("image", "audio", "text")}


def adopt_backbone(dst: AlignmentEncoder, src: AlignmentEncoder) -> None:
    """Copy embedding, positions and blocks from `src`; the head stays put.

    This is how masked-autoencoder pretraining hands its backbone to an
    alignment encoder: the projection and whitening of `dst` are left
    untouched.
    """
    if dst.modality != src.modality:
        raise ValueError(
            f"backbone transfer across modalities: '{src.modality}' -> '{dst.modality}'")
    nn.copy_params_into(dst.embed, src.embed)
    dst.pos.data = src.pos.data.copy()
    for blk_dst, blk_src in zip(dst.blocks, src.blocks):
        nn.copy_params_into(blk_dst, blk_src)


def make_log_tau(tau: float = TAU_INIT) -> Tensor:
    return Tensor(np.asarray(np.log(tau), dtype=np.float32), requires_grad=True)


def clamp_log_tau(log_tau: Tensor) -> None:
    np.clip(log_tau.data, np.log(TAU_MIN), np.log(TAU_MAX), out=log_tau.data)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def maskable_positions(modality: str) -> np.ndarray:
    """Token indices that masking may touch (text control tokens never)."""
    if modality in ("image", "audio"):
        return np.arange(TOKEN_SHAPES[modality][0])
    if modality == "text":
        return np.arange(1, 1 + N_FACTORS)  # the attribute positions
    raise ValueError(f"unknown modality '{modality}'")


def mask_count(modality: str, mask_ratio: float) -> int:
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must be in [0, 1], got {mask_ratio}")
    m = len(maskable_positions(modality))
    # round-half-up so the count is exact and monotone in the ratio
    return int(np.floor(mask_ratio * m + 0.5))


def mask_payload(sample: ModalitySample, mask_ratio: float,
                 rng: np.random.Generator) -> tuple[ModalitySample, np.ndarray]:
    """Mask a payload for self-supervision or condition dropout.

    Image/audio: the chosen patches/frames are overwritten with the
    payload-space mask value (0.0). Text: the chosen attribute tokens
    become EMPTY; BOS/EOS/PAD are never candidates. Returns the masked
    copy and a boolean token mask of length T (True = masked).
    """
    cand = maskable_positions(sample.modality)
    k = mask_count(sample.modality, mask_ratio)
    chosen = np.sort(rng.permutation(cand)[:k])
    length = TOKEN_SHAPES[sample.modality][0]
    mask = np.zeros(length, dtype=bool)
    mask[chosen] = True
    out = sample.copy()
    if sample.modality == "image":
        t = out.payload.reshape(4, 4, 4, 4).transpose(0, 2, 1, 3).reshape(16, 16).copy()
        t[mask] = MASK_FILL_VALUE
        out.payload = t.reshape(4, 4, 4, 4).transpose(0, 2, 1, 3).reshape(IMAGE_SHAPE).copy()
    elif sample.modality == "audio":
        t = out.payload.reshape(16, 4).copy()
        t[mask] = MASK_FILL_VALUE
        out.payload = t.reshape(AUDIO_LEN).copy()
    else:
        out.payload = out.payload.copy()
        out.payload[mask] = EMPTY
    return out, mask


# ---------------------------------------------------------------------------
# masked autoencoder
# ---------------------------------------------------------------------------

class MaskedAutoencoder(nn.Module):
    """Encoder backbone + learned mask token + tokenwise reconstruction head."""

    def __init__(self, modality: str, rng: np.random.Generator,
                 width: int = MODEL_WIDTH):
        self.encoder = AlignmentEncoder(modality, rng, width=width)
        self.mask_token = nn.param((width,), rng, scale=0.02)
        self.dec1 = nn.Linear(width, MLP_WIDTH, rng)
        self.dec2 = nn.Linear(MLP_WIDTH, MAE_TARGET_DIM[modality], rng)

    @property
    def modality(self) -> str:
        return self.encoder.modality

    def reconstruct(self, masked_tokens: np.ndarray, token_mask: np.ndarray,
                    batch: int) -> Tensor:
        """Predict original tokens from masked ones, (B*T, target_dim)."""
        enc = self.encoder
        h = enc.embed(T.const(masked_tokens, dtype=np.float32))
        # overwrite masked rows with the learned mask token before position adds
        keep = (~token_mask).astype(np.float32)[:, None]
        keep_m = T.const(np.repeat(keep, h.shape[1], axis=1), dtype=np.float32)
        fill_m = T.const(np.repeat(1.0 - keep, h.shape[1], axis=1), dtype=np.float32)
        mask_rows = nn.tile_rows(self.mask_token, h.shape[0])
        h = T.add(T.mul(h, keep_m), T.mul(mask_rows, fill_m))
        h = T.add(h, _tile_pos(enc.pos, batch))
        for blk in enc.blocks:
            h = blk(h, batch, enc._length)
        return self.dec2(T.silu(self.dec1(h)))


def mae_targets(sample: ModalitySample) -> np.ndarray:
    """Reconstruction target rows: raw tokens, or one-hot rows for text."""
    return tokens_of(sample)


def masked_reconstruction_loss(pred: Tensor, target: np.ndarray,
                               token_mask: np.ndarray) -> Tensor:
    """MSE over masked token rows only.

    The unmasked rows are multiplied out of the residual before the
    reduction, so perturbing them (in prediction or target) cannot change
    the value. Loss over an empty mask is defined as 0.
    """
    n_masked = int(token_mask.sum())
    if n_masked == 0:
        return T.const(0.0, dtype=pred.dtype)
    gate = T.const(np.repeat(token_mask.astype(np.float32)[:, None],
                             pred.shape[1], axis=1), dtype=pred.dtype)
    diff = T.sub(pred, T.const(target, dtype=pred.dtype))
    sq = T.mul(T.mul(diff, diff), gate)
    denom = 1.0 / (n_masked * pred.shape[1])
    return T.mul(T.tsum(sq), T.const(denom, dtype=pred.dtype))


def mae_pretrain_step(mae: MaskedAutoencoder, batch, mask_ratio: float,
                      optim: Adam, rng: np.random.Generator) -> float:
    """One masked-reconstruction update; returns the scalar loss.

    mask_ratio 0 masks nothing, the loss is 0 by definition and the step
    is a no-op (the optimizer is not advanced).
    """
    batch = list(batch)
    if not batch:
        raise ValueError("mae_pretrain_step: empty batch")
    for s in batch:
        if s.modality != mae.modality:
            raise ValueError(
                f"mixed-modality batch: expected '{mae.modality}', got '{s.modality}'")
    if mask_count(mae.modality, mask_ratio) == 0:
        return 0.0
    masked_rows, masks, targets = [], [], []
    for s in batch:
        xm, mask = mask_payload(s, mask_ratio, rng)
        masked_rows.append(tokens_of(xm))
        masks.append(mask)
        targets.append(mae_targets(s))
    pred = mae.reconstruct(np.concatenate(masked_rows, axis=0),
                           np.concatenate(masks), len(batch))
    loss = masked_reconstruction_loss(pred, np.concatenate(targets, axis=0),
                                      np.concatenate(masks))
    grads = T.backward(loss, optim.params)
    optim.step(grads)
    return loss.item()


# ---------------------------------------------------------------------------
# contrastive alignment
# ---------------------------------------------------------------------------

def contrastive_loss(za: Tensor, zb: Tensor, log_tau) -> Tensor:
    """Symmetric InfoNCE over the N x N cosine matrix, scaled by 1/tau.

    `log_tau` is the log temperature, as a float or a scalar Tensor
    (learnable). Row i of `za` and row i of `zb` are the matched pair;
    both retrieval directions are averaged. Requires N >= 2 and
    unit-norm rows.
    """
    if za.shape != zb.shape or len(za.shape) != 2:
        raise T.ShapeError(f"contrastive_loss: shapes {za.shape} vs {zb.shape}")
    n = za.shape[0]
    if n < 2:
        raise ValueError(f"contrastive_loss needs at least 2 pairs, got {n}")
    for z in (za, zb):
        norms = np.linalg.norm(z.data, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-3:
            raise ValueError("contrastive_loss: rows must be unit-norm")
    if not isinstance(log_tau, Tensor):
        log_tau = T.const(np.asarray(log_tau, dtype=za.dtype), dtype=za.dtype)
    inv_tau = T.exp(T.mul(log_tau, T.const(-1.0, dtype=za.dtype)))
    sims = T.matmul(za, T.transpose(zb))
    logits = T.mul(sims, inv_tau)
    eye = T.const(np.eye(n), dtype=za.dtype)

    def direction(lg):
        lse = T.logsumexp(lg)                       # (n,)
        diag = T.tsum(T.mul(lg, eye), axis=-1)      # (n,)
        return T.tmean(T.sub(lse, diag))

    loss = T.add(direction(logits), direction(T.transpose(logits)))
    return T.mul(loss, T.const(0.5, dtype=za.dtype))


def _check_optimizer_scope(optim: Adam, allowed: list[Tensor], forbidden: list[Tensor]):
    allowed_ids = {id(p) for p in allowed}
    forbidden_ids = {id(p) for p in forbidden}
    for p in optim.params:
        if id(p) in forbidden_ids:
            raise FrozenParameterError("optimizer owns frozen encoder parameters")
        if id(p) not in allowed_ids:
            raise FrozenParameterError("optimizer owns parameters outside the trainable set")


def align_step(enc_a: AlignmentEncoder, enc_b: AlignmentEncoder, pairs,
               log_tau: Tensor, optim: Adam) -> float:
    """Joint contrastive update of two encoders plus the temperature."""
    a_samples = [p[0] for p in pairs]
    b_samples = [p[1] for p in pairs]
    za = encode_batch(enc_a, a_samples)
    zb = encode_batch(enc_b, b_samples)
    loss = contrastive_loss(za, zb, log_tau)
    grads = T.backward(loss, optim.params)
    optim.step(grads)
    clamp_log_tau(log_tau)
    return loss.item()


def finetune_align_step(enc: AlignmentEncoder, frozen_text: AlignmentEncoder,
                        pairs, log_tau: Tensor, optim: Adam) -> float:
    """One fine-tune update of `enc` against the frozen text encoder.

    Only `enc` and the temperature may be in the optimizer; the text
    encoder must be frozen, and any attempt to update it raises.
    """
    if any(p.requires_grad for p in frozen_text.parameters()):
        raise FrozenParameterError("text encoder must be frozen during fine-tuning")
    _check_optimizer_scope(optim, enc.parameters() + [log_tau], frozen_text.parameters())
    text_before = frozen_text.digest()
    m_samples = [p[0] for p in pairs]
    t_samples = [p[1] for p in pairs]
    zm = encode_batch(enc, m_samples)
    zt = encode_batch(frozen_text, t_samples)
    loss = contrastive_loss(zm, zt, log_tau)
    grads = T.backward(loss, optim.params)
    optim.step(grads)
    clamp_log_tau(log_tau)
    if frozen_text.digest() != text_before:
        raise FrozenParameterError("text encoder parameters changed during fine-tuning")
    return loss.item()


# ---------------------------------------------------------------------------
# condition interpolation
# ---------------------------------------------------------------------------

def interpolate_conditions(latents, weights=None,
                           renormalize: bool = False) -> LatentCondition:
    """Weighted arithmetic mean of condition latents.

    Weights must be non-negative and sum to 1 (uniform when omitted).
    The mean is NOT re-normalized to the unit sphere unless
    `renormalize` is set; interior points keep norm < 1 by design.
    """
    latents = list(latents)
    if not latents:
        raise ValueError("interpolate_conditions: empty latent list")
    n = len(latents)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {weights.shape}")
    if np.any(weights < 0.0):
        raise ValueError("interpolation weights must be non-negative")
    if abs(float(weights.sum()) - 1.0) > 1e-9:
        raise ValueError(f"interpolation weights must sum to 1, got {weights.sum()!r}")
    if n == 1:
        return LatentCondition(v=latents[0].v.copy(),
                               source_modality=latents[0].source_modality)
    v = np.zeros_like(latents[0].v, dtype=np.float64)
    for w, lat in zip(weights, latents):
        v = v + w * lat.v.astype(np.float64)
    if renormalize:
        v = v / np.linalg.norm(v)
    return LatentCondition(v=v.astype(latents[0].v.dtype), source_modality="compound")
