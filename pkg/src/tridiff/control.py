"""Control branch: trainable copy of the denoiser's encoder half whose
residuals are injected into the base skip connections.

The branch is constructed as a bit-identical copy of the base encoder
blocks, middle block, and embedding MLPs. Each skip site (every encoder
block output plus the middle output) gets a zero-initialized tokenwise
projection, so at construction the branch contributes exactly nothing to
the fused stack; gradients still reach the zero projections because
d(Wx)/dW depends only on the input.

Fusion adds the scaled residual sum to the base skips:
    fused[s] = base[s] + scale * combine(residual_j[s] over conditions j)
with combine = sum (default) or mean. When a caller provides a single
condition at inference, the scale is forced to zero and the branch is
skipped entirely: one condition carries no extra information beyond the
base conditioning, which already receives that same latent.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .denoiser import (ConditionalDenoiser, DenoiserConfig, ResBlock,
                       sinusoidal_features)
from .encoders import LatentCondition, interpolate_conditions
from .tensor import Tensor

DEFAULT_CONTROL_SCALE = 0.1
FUSION_MODES = ("sum", "mean")

# Submodules mirrored from the base denoiser into the control branch.
COPIED_SUBMODULES = ("time_mlp", "cond_mlp", "in_proj", "enc_blocks", "downs", "mid")


class ControlBranch(nn.Module):
    """Encoder-half copy plus one zero projection per skip site."""

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
        self.zero_projs = [nn.ZeroLinear(width) for _, width in cfg.skip_shapes()]

    @property
    def cfg(self) -> DenoiserConfig:
        return self._cfg


def init_control_branch(base: ConditionalDenoiser,
                        rng: np.random.Generator | None = None) -> ControlBranch:
    """Trainable copy of the base encoder half; zero projections stay zero.

    The copied submodules are bit-identical to the base at return time
    (the caller may verify with digests); they share no storage with it.
    """
    if rng is None:
        rng = np.random.default_rng(0)  # shapes only; values are overwritten
    ctrl = ControlBranch(base.cfg, rng)
    for name in COPIED_SUBMODULES:
        src, dst = getattr(base, name), getattr(ctrl, name)
        if isinstance(src, list):
            for s_item, d_item in zip(src, dst):
                nn.copy_params_into(d_item, s_item)
        else:
            nn.copy_params_into(dst, src)
    return ctrl


def copied_digest(module) -> str:
    """Digest of the mirrored submodule set, comparable base vs branch."""
    import hashlib
    h = hashlib.sha256()
    for name in COPIED_SUBMODULES:
        obj = getattr(module, name)
        items = obj if isinstance(obj, list) else [obj]
        for item in items:
            h.update(item.digest().encode())
    return h.hexdigest()


def control_forward(ctrl: ControlBranch, z: Tensor, t, cond: Tensor,
                    batch: int) -> list[Tensor]:
    """Residual stack for one condition: encoder pass + zero projections.

    Returns one residual per skip site (enc_blocks + 1 entries) with the
    same shapes as the base skip stack.
    """
    cfg = ctrl.cfg
    emb = T.add(ctrl.time_mlp(T.const(
        sinusoidal_features(t, cfg.time_dim), dtype=np.float32)), ctrl.cond_mlp(cond))
    residuals: list[Tensor] = []
    h = ctrl.in_proj(z)
    length = cfg.latent_len
    for i, blk in enumerate(ctrl.enc_blocks):
        h = blk(h, emb, batch, length)
        residuals.append(ctrl.zero_projs[i](h))
        r = i // cfg.blocks_per_res
        if (i + 1) % cfg.blocks_per_res == 0 and r < cfg.resolutions - 1:
            h = ctrl.downs[r](nn.halve_rows(h, batch, length))
            length //= 2
    h = ctrl.mid(h, emb, batch, length)
    residuals.append(ctrl.zero_projs[-1](h))
    return residuals


def fuse(base_skips: list[Tensor], residual_stacks: list[list[Tensor]],
         scale: float, mode: str = "sum") -> list[Tensor]:
    """fused[s] = base[s] + scale * combine_j(residual_j[s])."""
    if mode not in FUSION_MODES:
        raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got '{mode}'")
    if not residual_stacks or scale == 0.0:
        return list(base_skips)
    for stack in residual_stacks:
        if len(stack) != len(base_skips):
            raise T.ShapeError(
                f"residual stack has {len(stack)} sites, base has {len(base_skips)}")
    eff = scale / len(residual_stacks) if mode == "mean" else scale
    fused = []
    for s, base in enumerate(base_skips):
        extra = residual_stacks[0][s]
        for stack in residual_stacks[1:]:
            extra = T.add(extra, stack[s])
        fused.append(T.add(base, T.mul(extra, T.const(eff, dtype=base.dtype))))
    return fused


def denoise(base: ConditionalDenoiser, ctrl: ControlBranch | None, z: Tensor,
            t, base_cond: Tensor, control_conds: list[Tensor], scale: float,
            mode: str = "sum", batch: int = 1) -> Tensor:
    """Assemble one noise prediction from base + control residuals.

    `base_cond` conditions the base network; each entry of
    `control_conds` runs the control branch once. Training calls this
    directly (masked condition on the base, full condition on the
    branch); inference goes through `compound_denoise`.
    """
    emb = base.combined_embedding(t, base_cond)
    skips = base.encode_features(z, emb, batch)
    if ctrl is not None and control_conds and scale != 0.0:
        stacks = [control_forward(ctrl, z, t, c, batch) for c in control_conds]
        skips = fuse(skips, stacks, scale, mode)
    return base.decode_features(skips, emb, batch)


def compound_denoise(base: ConditionalDenoiser, ctrl: ControlBranch | None,
                     z: Tensor, t, condition_sets: list[np.ndarray],
                     weights=None, scale: float = DEFAULT_CONTROL_SCALE,
                     mode: str = "sum", batch: int = 1) -> Tensor:
    """Inference-side prediction under a set of condition modalities.

    `condition_sets` holds one (batch, d) latent matrix per conditioning
    modality. The base network sees their interpolation; the control
    branch runs once per modality. With a single condition the scale is
    forced to zero and the branch is skipped: the prediction is exactly
    the base network's.
    """
    if not condition_sets:
        raise ValueError("compound_denoise: need at least one condition set")
    n_cond = len(condition_sets)
    mats = [np.asarray(c, dtype=np.float32).reshape(batch, -1) for c in condition_sets]
    if weights is None:
        weights = np.full(n_cond, 1.0 / n_cond)
    weights = np.asarray(weights, dtype=np.float64)
    mixed = np.zeros_like(mats[0], dtype=np.float64)
    for w, m in zip(weights, mats):
        if w < 0:
            raise ValueError("interpolation weights must be non-negative")
        mixed += w * m
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("interpolation weights must sum to 1")
    if n_cond == 1:
        mixed = mats[0]  # exact: single condition passes through untouched
        scale = 0.0
    base_cond = T.const(np.asarray(mixed, dtype=np.float32), dtype=np.float32)
    ctrl_conds = [] if n_cond == 1 else [T.const(m, dtype=np.float32) for m in mats]
    return denoise(base, None if n_cond == 1 else ctrl, z, t, base_cond,
                   ctrl_conds, scale, mode, batch)


def interpolate_condition_latents(conditions: list[LatentCondition],
                                  weights=None) -> np.ndarray:
    """Convenience: LatentCondition list -> mixed vector via the encoder rule."""
    return interpolate_conditions(conditions, weights).v
