"""Waveform encoder: strided convolutions down to 75 frames/second, then a
pre-norm transformer whose feed-forward sublayers are a domain
mixture-of-experts (one always-on shared expert plus sigmoid-routed experts
with top-k gating).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    conv1d,
    div,
    gelu,
    layer_norm,
    linear,
    masked_fill_rows,
    matmul,
    mul,
    reshape,
    rope_attention,
    sigmoid,
    transpose,
    tsum,
)

__all__ = [
    "MoEConfig",
    "EncoderConfig",
    "init_encoder_params",
    "conv_encode",
    "moe_gate",
    "moe_mix",
    "moe_ffn",
    "transformer_encode",
    "encode_frames",
]


@dataclass(frozen=True)
class MoEConfig:
    n_shared: int = 1
    n_routed: int = 3
    k_routed: int = 1
    expert_dim: int = 1024

    def __post_init__(self):
        if not (1 <= self.k_routed <= self.n_routed):
            raise ValueError(f"need 1 <= k_routed <= n_routed, got k={self.k_routed}, n={self.n_routed}")
        if self.n_shared < 0 or self.expert_dim < 1:
            raise ValueError("n_shared must be >= 0 and expert_dim >= 1")


@dataclass(frozen=True)
class EncoderConfig:
    strides: tuple = (2, 4, 5, 4, 2)
    conv_channels: tuple = (32, 64, 128, 256, 512)
    hidden: int = 512
    layers: int = 8
    heads: int = 8
    mlp_dim: int = 2048
    moe: MoEConfig = field(default_factory=MoEConfig)

    def __post_init__(self):
        if len(self.strides) != len(self.conv_channels):
            raise ValueError(
                f"strides and conv_channels lengths differ: {len(self.strides)} vs {len(self.conv_channels)}"
            )
        if self.conv_channels[-1] != self.hidden:
            raise ValueError(
                f"last conv channel count {self.conv_channels[-1]} must equal hidden {self.hidden}"
            )
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> dict:
    """Deterministic parameter init, keyed 'enc.*'. Conv weights use fan-in
    scaling; attention/expert weights std 0.02; router centroids std 0.02."""
    p = {}
    c_in = 1
    for i, (stride, c_out) in enumerate(zip(cfg.strides, cfg.conv_channels)):
        k = 2 * stride
        std = 1.0 / np.sqrt(c_in * k)
        p[f"enc.conv{i}.w"] = rng.normal(0.0, std, (c_out, c_in, k))
        p[f"enc.conv{i}.b"] = np.zeros(c_out)
        c_in = c_out
    h, e = cfg.hidden, cfg.moe.expert_dim
    for i in range(cfg.layers):
        pre = f"enc.blk{i}"
        p[f"{pre}.ln1.g"] = np.ones(h)
        p[f"{pre}.ln1.b"] = np.zeros(h)
        for nm in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{nm}"] = rng.normal(0.0, 0.02, (h, h))
        p[f"{pre}.ln2.g"] = np.ones(h)
        p[f"{pre}.ln2.b"] = np.zeros(h)
        for j in range(cfg.moe.n_shared):
            p[f"{pre}.shared{j}.w1"] = rng.normal(0.0, 0.02, (e, h))
            p[f"{pre}.shared{j}.b1"] = np.zeros(e)
            p[f"{pre}.shared{j}.w2"] = rng.normal(0.0, 0.02, (h, e))
            p[f"{pre}.shared{j}.b2"] = np.zeros(h)
        for j in range(cfg.moe.n_routed):
            p[f"{pre}.routed{j}.w1"] = rng.normal(0.0, 0.02, (e, h))
            p[f"{pre}.routed{j}.b1"] = np.zeros(e)
            p[f"{pre}.routed{j}.w2"] = rng.normal(0.0, 0.02, (h, e))
            p[f"{pre}.routed{j}.b2"] = np.zeros(h)
        p[f"{pre}.centroids"] = rng.normal(0.0, 0.02, (cfg.moe.n_routed, h))
    p["enc.final_ln.g"] = np.ones(h)
    p["enc.final_ln.b"] = np.zeros(h)
    p["enc.mask_embed"] = rng.normal(0.0, 0.02, h)
    return {k: v.astype(dtype) for k, v in p.items()}


def conv_encode(samples, params: dict, cfg: EncoderConfig) -> Tensor:
    """Waveform (T,) to pre-transformer features (floor(T/320), hidden).

    These features double as the contrastive targets of the semantic
    training stage.
    """
    x = samples if isinstance(samples, Tensor) else Tensor(np.asarray(samples))
    if x.ndim != 1:
        raise ShapeError(f"conv_encode expects a 1-D waveform, got shape {x.shape}")
    if x.shape[0] < cfg.downsample:
        raise ValueError(
            f"clip of {x.shape[0]} samples is shorter than one frame ({cfg.downsample} samples)"
        )
    x = reshape(x, (x.shape[0], 1))
    last = len(cfg.strides) - 1
    for i, stride in enumerate(cfg.strides):
        x = conv1d(
            x,
            params[f"enc.conv{i}.w"],
            params[f"enc.conv{i}.b"],
            stride=stride,
            padding=(stride // 2, stride - stride // 2),
        )
        if i != last:
            x = gelu(x)
    return x


def moe_gate(u, centroids: Tensor, k_routed: int) -> Tensor:
    """Routed-expert gates from sigmoid token-to-expert affinities.

    Affinity s_i = sigmoid(u . e_i); the top k_routed affinities (ties
    broken toward the lowest expert index) are kept and renormalized to
    sum to 1, the rest are exactly zero. Sigmoid positivity guarantees a
    nonzero normalizer. Output matches u's leading shape: (n_routed,) for
    a single vector, (T, n_routed) for a sequence.
    """
    single = u.ndim == 1
    ut = reshape(u, (1, u.shape[0])) if single else u
    s = sigmoid(matmul(ut, transpose(centroids)))            # (T, N_r)
    order = np.argsort(-s.data, axis=1, kind="stable")       # stable sort -> lowest index on ties
    sel = order[:, :k_routed]
    keep = np.zeros_like(s.data)
    np.put_along_axis(keep, sel, 1.0, axis=1)
    kept = mul(s, Tensor(keep))
    gates = div(kept, tsum(kept, axis=1, keepdims=True))
    return reshape(gates, (gates.shape[1],)) if single else gates


def _expert_ffn(u: Tensor, params: dict, prefix: str) -> Tensor:
    h = linear(u, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    return linear(gelu(h), params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def moe_mix(u: Tensor, params: dict, prefix: str, cfg: MoEConfig) -> Tensor:
    """Sum of shared experts plus gate-weighted routed experts (no residual).

    Routed experts are evaluated densely and scaled by their gates; zero
    gates contribute exactly zero, so this equals masked sparse execution.
    """
    single = u.ndim == 1
    ut = reshape(u, (1, u.shape[0])) if single else u
    gates = moe_gate(ut, params[f"{prefix}.centroids"], cfg.k_routed)
    mix = None
    for j in range(cfg.n_shared):
        out = _expert_ffn(ut, params, f"{prefix}.shared{j}")
        mix = out if mix is None else add(mix, out)
    for j in range(cfg.n_routed):
        weighted = mul(_expert_ffn(ut, params, f"{prefix}.routed{j}"), gates[:, j : j + 1])
        mix = weighted if mix is None else add(mix, weighted)
    return reshape(mix, (mix.shape[1],)) if single else mix


def moe_ffn(u: Tensor, params: dict, prefix: str, cfg: MoEConfig) -> Tensor:
    """h = u + sum(shared experts) + sum(gated routed experts)."""
    return add(u, moe_mix(u, params, prefix, cfg))


def transformer_encode(
    feats: Tensor, params: dict, cfg: EncoderConfig, final_norm: bool = True
) -> Tensor:
    """Pre-norm blocks of (RoPE self-attention -> MoE feed-forward), each
    residual, then an optional final layer norm. Output shape = input shape.

    With zeroed attention output and expert second-layer weights the block
    stack is the identity (skip ``final_norm`` to observe it exactly).
    """
    x = feats
    for i in range(cfg.layers):
        pre = f"enc.blk{i}"
        attn_in = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        x = add(
            x,
            rope_attention(
                attn_in,
                params[f"{pre}.attn.wq"],
                params[f"{pre}.attn.wk"],
                params[f"{pre}.attn.wv"],
                params[f"{pre}.attn.wo"],
                heads=cfg.heads,
            ),
        )
        ffn_in = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        x = add(x, moe_mix(ffn_in, params, pre, cfg.moe))
    if final_norm:
        x = layer_norm(x, params["enc.final_ln.g"], params["enc.final_ln.b"])
    return x


def encode_frames(
    samples,
    params: dict,
    cfg: EncoderConfig,
    mask: Optional[np.ndarray] = None,
) -> tuple:
    """Full encoder pass: conv features, optional span-mask replacement by
    the learned mask embedding, transformer, final norm.

    Returns (latent frames, conv features). When ``mask`` (a boolean array
    over frames) is given, masked rows of the conv features are replaced by
    the shared mask embedding before the transformer; the returned conv
    features stay unmasked, as the contrastive targets must be.
    """
    conv_feats = conv_encode(samples, params, cfg)
    x = conv_feats
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (conv_feats.shape[0],):
            raise ShapeError(
                f"mask shape {mask.shape} does not match frame count {conv_feats.shape[0]}"
            )
        x = masked_fill_rows(x, mask, params["enc.mask_embed"])
    frames = transformer_encode(x, params, cfg)
    return frames, conv_feats
