"""Waveform decoder: transposed-convolution mirror of the encoder, 320x
upsampling from latent frames to 24 kHz samples, tanh output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, conv1d, conv1d_transpose, gelu, reshape, tanh

__all__ = ["DecoderConfig", "init_decoder_params", "decode"]


@dataclass(frozen=True)
class DecoderConfig:
    strides: tuple = (2, 4, 5, 4, 2)
    channels: tuple = (256, 128, 64, 32, 16)
    hidden: int = 512
    out_kernel: int = 7

    def __post_init__(self):
        if len(self.strides) != len(self.channels):
            raise ValueError(
                f"strides and channels lengths differ: {len(self.strides)} vs {len(self.channels)}"
            )
        if self.out_kernel % 2 != 1:
            raise ValueError(f"out_kernel must be odd, got {self.out_kernel}")

    @property
    def upsample(self) -> int:
        return int(np.prod(self.strides))


def init_decoder_params(cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float64) -> dict:
    p = {}
    c_in = cfg.hidden
    for i, (stride, c_out) in enumerate(zip(cfg.strides, cfg.channels)):
        k = 2 * stride
        std = 1.0 / np.sqrt(c_in * k)
        p[f"dec.tconv{i}.w"] = rng.normal(0.0, std, (c_in, c_out, k))
        p[f"dec.tconv{i}.b"] = np.zeros(c_out)
        c_in = c_out
    std = 1.0 / np.sqrt(c_in * cfg.out_kernel)
    p["dec.out.w"] = rng.normal(0.0, std, (1, c_in, cfg.out_kernel))
    p["dec.out.b"] = np.zeros(1)
    return {k: v.astype(dtype) for k, v in p.items()}


def decode(quantized: Tensor, params: dict, cfg: DecoderConfig) -> Tensor:
    """Quantized frames (T, hidden) to waveform (T * 320,), values in (-1, 1).

    Each transposed stage (kernel 2*stride) overshoots by one stride and is
    cropped symmetrically, mirroring the encoder's padding, so the length
    law |decode(q)| = 320 * T holds exactly for every T >= 1.
    """
    if quantized.ndim != 2:
        raise ShapeError(f"decode expects (frames, hidden), got shape {quantized.shape}")
    if quantized.shape[0] < 1:
        raise ValueError("decode requires at least one frame")
    if quantized.shape[1] != cfg.hidden:
        raise ShapeError(f"decode hidden dim {quantized.shape[1]} != config hidden {cfg.hidden}")

    x = quantized
    for i, stride in enumerate(cfg.strides):
        x = conv1d_transpose(x, params[f"dec.tconv{i}.w"], params[f"dec.tconv{i}.b"], stride=stride)
        lo = stride // 2
        x = x[lo : lo + x.shape[0] - stride]  # (T+1)*s -> T*s
        x = gelu(x)
    half = cfg.out_kernel // 2
    x = conv1d(x, params["dec.out.w"], params["dec.out.b"], stride=1, padding=(half, half))
    return reshape(tanh(x), (x.shape[0],))
