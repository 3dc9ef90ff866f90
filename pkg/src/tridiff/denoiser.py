"""Conditional UNet denoiser over per-modality latent grids.

The network predicts the noise in a latent z_t given the timestep and a
condition vector from the shared alignment space. Layout: a token grid
of (length, channels) per sample, batched as (B*length, channels).
Encoder blocks push their outputs onto a skip stack (one per block plus
the middle output); the decoder consumes them in mirror order, so block
i of the decoder merges the skip of encoder block E-1-i. Downsampling
halves the grid between resolutions and upsampling mirrors it exactly.

Conditioning is additive: each block projects (time embedding +
condition embedding) to its width and adds it to every grid position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

COND_DIM = 32
EMB_DIM = 32
TIME_DIM = 16

# Latent geometry per modality; channels are fixed at 4 and the payload
# byte count is preserved (image 16x16 -> 64x4, audio 64 -> 16x4, text
# 12 tokens -> 12x4 embedding rows).
LATENT_SHAPES = {"image": (64, 4), "audio": (16, 4), "text": (12, 4)}


@dataclass(frozen=True)
class DenoiserConfig:
    modality: str
    latent_len: int
    channels: int
    enc_blocks: int = 6
    resolutions: int = 3
    widths: tuple = (16, 24, 32)
    cond_dim: int = COND_DIM
    emb_dim: int = EMB_DIM
    time_dim: int = TIME_DIM
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.enc_blocks % self.resolutions != 0:
            raise ValueError(
                f"enc_blocks ({self.enc_blocks}) must divide evenly into "
                f"resolutions ({self.resolutions})")
        if len(self.widths) != self.resolutions:
            raise ValueError(f"need {self.resolutions} widths, got {len(self.widths)}")
        if self.latent_len % (2 ** (self.resolutions - 1)) != 0:
            raise ValueError(
                f"latent_len {self.latent_len} not divisible by "
                f"2^{self.resolutions - 1}")
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even")

    @property
    def blocks_per_res(self) -> int:
        return self.enc_blocks // self.resolutions

    def length_at(self, res: int) -> int:
        return self.latent_len // (2 ** res)

    def skip_shapes(self) -> list[tuple[int, int]]:
        """(length, width) of each skip site: E block outputs then middle."""
        shapes = []
        for i in range(self.enc_blocks):
            r = i // self.blocks_per_res
            shapes.append((self.length_at(r), self.widths[r]))
        shapes.append((self.length_at(self.resolutions - 1), self.widths[-1]))
        return shapes


def default_config(modality: str, enc_blocks: int = 6, resolutions: int = 3,
                   widths: tuple = (16, 24, 32)) -> DenoiserConfig:
    if modality not in LATENT_SHAPES:
        raise ValueError(f"unknown modality '{modality}'")
    length, ch = LATENT_SHAPES[modality]
    return DenoiserConfig(modality=modality, latent_len=length, channels=ch,
                          enc_blocks=enc_blocks, resolutions=resolutions,
                          widths=tuple(widths))


def sinusoidal_features(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos timestep features; t=0 gives [0, 1, 0, 1, ...].

    Frequencies fall geometrically from 1 to 1/10000 across dim/2 bands.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    if half > 1:
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.shape[0], dim), dtype=np.float32)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class ResBlock(nn.Module):
    """Pre-norm residual MLP with an additive conditioning injection."""

    def __init__(self, width: int, emb_dim: int, mlp_ratio: int,
                 rng: np.random.Generator):
        self.ln = nn.LayerNorm(width)
        self.inj = nn.Linear(emb_dim, width, rng)
        self.fc1 = nn.Linear(width, width * mlp_ratio, rng)
        self.fc2 = nn.Linear(width * mlp_ratio, width, rng)

    def __call__(self, h: Tensor, emb: Tensor, batch: int, length: int) -> Tensor:
        u = self.ln(h)
        u = T.add(u, nn.expand_per_sample(self.inj(emb), batch, length))
        u = self.fc2(T.silu(self.fc1(u)))
        return T.add(h, u)


class ConditionalDenoiser(nn.Module):
    """Noise predictor for one output modality."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self._cfg = cfg
        w, e, bpr = cfg.widths, cfg.emb_dim, cfg.blocks_per_res
        self.time_mlp = nn.MLP(cfg.time_dim, e, e, rng)
        self.cond_mlp = nn.MLP(cfg.cond_dim, e, e, rng)
        self.in_proj = nn.Linear(cfg.channels, w[0], rng)
        self.enc_blocks = [
            ResBlock(w[i // bpr], e, cfg.mlp_ratio, rng) for i in range(cfg.enc_blocks)]
        self.downs = [nn.Linear(w[r], w[r + 1], rng) for r in range(cfg.resolutions - 1)]
        self.mid = ResBlock(w[-1], e, cfg.mlp_ratio, rng)
        self.skip_merges = [
            nn.Linear(2 * w[cfg.resolutions - 1 - i // bpr],
                      w[cfg.resolutions - 1 - i // bpr], rng)
            for i in range(cfg.enc_blocks)]
        self.ups = [nn.Linear(w[r + 1], w[r], rng) for r in range(cfg.resolutions - 1)]
        self.dec_blocks = [
            ResBlock(w[cfg.resolutions - 1 - i // bpr], e, cfg.mlp_ratio, rng)
            for i in range(cfg.enc_blocks)]
        # Zero-init final projection: a fresh denoiser predicts zero noise.
        self.out_proj = nn.Linear(w[0], cfg.channels, rng)
        self.out_proj.w.data[:] = 0.0
        self.out_proj.b.data[:] = 0.0
        self._check_palindrome()

    @property
    def cfg(self) -> DenoiserConfig:
        return self._cfg

    def _check_palindrome(self):
        """Skip shapes must mirror: decoder i consumes encoder E-1-i."""
        cfg = self._cfg
        shapes = cfg.skip_shapes()
        for i in range(cfg.enc_blocks):
            want = shapes[cfg.enc_blocks - 1 - i]
            r = cfg.resolutions - 1 - i // cfg.blocks_per_res
            got = (cfg.length_at(r), cfg.widths[r])
            if want != got:
                raise T.ShapeError(
                    f"skip shape mismatch at decoder block {i}: consumes "
                    f"{want} from encoder block {cfg.enc_blocks - 1 - i}, "
                    f"expects {got}")

    # ---- embeddings ----

    def time_embedding(self, t) -> Tensor:
        feats = sinusoidal_features(t, self._cfg.time_dim)
        return self.time_mlp(T.const(feats, dtype=np.float32))

    def cond_embedding(self, c: Tensor) -> Tensor:
        return self.cond_mlp(c)

    # ---- encoder / decoder halves ----

    def encode_features(self, z: Tensor, emb: Tensor, batch: int) -> list[Tensor]:
        """Run input + encoder blocks + middle; returns the skip stack.

        `z` is (B*L, C), `emb` the combined (B, emb_dim) conditioning.
        The stack has enc_blocks entries plus the middle output, in push
        order (shallow first, middle last).
        """
        cfg = self._cfg
        skips: list[Tensor] = []
        h = self.in_proj(z)
        length = cfg.latent_len
        for i, blk in enumerate(self.enc_blocks):
            h = blk(h, emb, batch, length)
            skips.append(h)
            r = i // cfg.blocks_per_res
            end_of_res = (i + 1) % cfg.blocks_per_res == 0
            if end_of_res and r < cfg.resolutions - 1:
                h = self.downs[r](nn.halve_rows(h, batch, length))
                length //= 2
        h = self.mid(h, emb, batch, length)
        skips.append(h)
        return skips

    def decode_features(self, skips: list[Tensor], emb: Tensor, batch: int) -> Tensor:
        """Consume a skip stack in mirror order and project to noise space."""
        cfg = self._cfg
        if len(skips) != cfg.enc_blocks + 1:
            raise T.ShapeError(
                f"skip stack has {len(skips)} entries, expected {cfg.enc_blocks + 1}")
        h = skips[-1]
        length = cfg.length_at(cfg.resolutions - 1)
        for i, blk in enumerate(self.dec_blocks):
            skip = skips[cfg.enc_blocks - 1 - i]
            if skip.shape != h.shape:
                raise T.ShapeError(
                    f"skip shape mismatch at decoder block {i}: "
                    f"{skip.shape} vs {h.shape}")
            h = self.skip_merges[i](T.concat([h, skip], axis=1))
            h = blk(h, emb, batch, length)
            r = cfg.resolutions - 1 - i // cfg.blocks_per_res
            end_of_res = (i + 1) % cfg.blocks_per_res == 0
            if end_of_res and r > 0:
                h = self.ups[r - 1](nn.double_rows(h, batch, length))
                length *= 2
        return self.out_proj(h)

    def combined_embedding(self, t, cond: Tensor) -> Tensor:
        return T.add(self.time_embedding(t), self.cond_embedding(cond))

    def __call__(self, z: Tensor, t, cond: Tensor, batch: int):
        """(eps_hat, skip stack) for a batched latent matrix."""
        emb = self.combined_embedding(t, cond)
        skips = self.encode_features(z, emb, batch)
        return self.decode_features(skips, emb, batch), skips


def unet_forward(model: ConditionalDenoiser, z: np.ndarray, t: int,
                 cond: np.ndarray):
    """Single-sample forward: (L, C) latent -> (eps_hat (L, C), skips).

    Pure function of (parameters, inputs); no graph is recorded.
    """
    cfg = model.cfg
    if z.shape != (cfg.latent_len, cfg.channels):
        raise T.ShapeError(
            f"latent shape {z.shape} != ({cfg.latent_len}, {cfg.channels})")
    with T.no_grad():
        eps, skips = model(T.const(z, dtype=np.float32), np.asarray([t]),
                           T.const(cond.reshape(1, -1), dtype=np.float32), 1)
    return eps.data.copy(), [s.data.copy() for s in skips]
