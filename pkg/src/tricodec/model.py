"""Codec assembly: configuration presets, parameter ownership, and the
end-to-end encode/quantize/decode paths.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .autodiff import Tensor
from .decoder import DecoderConfig, decode, init_decoder_params
from .encoder import EncoderConfig, MoEConfig, conv_encode, encode_frames, init_encoder_params
from .quantizer import QuantizerConfig, TokenStream, init_quantizer_params, quantize, simvq_embed
from .signal import AudioClip, Domain

__all__ = ["CodecConfig", "Codec"]


@dataclass(frozen=True)
class CodecConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    sample_rate: int = 24000

    def __post_init__(self):
        if self.encoder.downsample != self.decoder.upsample:
            raise ValueError(
                f"encoder downsample {self.encoder.downsample} != decoder upsample {self.decoder.upsample}"
            )
        if self.quantizer.hidden != self.encoder.hidden or self.decoder.hidden != self.encoder.hidden:
            raise ValueError("encoder, quantizer, and decoder hidden sizes must agree")
        if self.sample_rate % self.encoder.downsample != 0:
            raise ValueError(
                f"sample_rate {self.sample_rate} not divisible by downsample {self.encoder.downsample}"
            )

    @property
    def downsample(self) -> int:
        return self.encoder.downsample

    @property
    def tokens_per_second(self) -> int:
        return self.sample_rate // self.downsample

    @classmethod
    def full(cls) -> "CodecConfig":
        return cls()

    @classmethod
    def toy(cls) -> "CodecConfig":
        """Desk-scale preset: hidden 64, 2 transformer layers, 512-entry
        codebook split 128/128/256. Same 320x framing as the full model."""
        return cls(
            encoder=EncoderConfig(
                strides=(2, 4, 5, 4, 2),
                conv_channels=(8, 16, 32, 32, 64),
                hidden=64,
                layers=2,
                heads=4,
                mlp_dim=256,
                moe=MoEConfig(n_shared=1, n_routed=3, k_routed=1, expert_dim=128),
            ),
            quantizer=QuantizerConfig(codebook_size=512, hidden=64, speech_end=128, music_end=256),
            decoder=DecoderConfig(
                strides=(2, 4, 5, 4, 2), channels=(32, 32, 16, 8, 8), hidden=64, out_kernel=7
            ),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        d = dict(d)
        enc = dict(d.pop("encoder"))
        moe = MoEConfig(**enc.pop("moe"))
        return cls(
            encoder=EncoderConfig(
                **{k: tuple(v) if isinstance(v, list) else v for k, v in enc.items()}, moe=moe
            ),
            quantizer=QuantizerConfig(**d.pop("quantizer")),
            decoder=DecoderConfig(
                **{k: tuple(v) if isinstance(v, list) else v for k, v in dict(d.pop("decoder")).items()}
            ),
            **d,
        )


_FROZEN = ("vq.base",)


class Codec:
    """Owns the parameter set and exposes the encode/quantize/decode paths.

    Parameters live in an insertion-ordered name -> Tensor dict; the frozen
    codebook base has requires_grad False and is skipped by optimizers.
    Weights are immutable during inference, so concurrent encode/decode
    calls are safe; training steps require exclusive access.
    """

    def __init__(self, config: CodecConfig, seed: int = 0, dtype=np.float64, params: Optional[dict] = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        if params is None:
            rng = np.random.default_rng(seed)
            raw = {}
            raw.update(init_encoder_params(config.encoder, rng, dtype))
            raw.update(init_quantizer_params(config.quantizer, rng, dtype))
            raw.update(init_decoder_params(config.decoder, rng, dtype))
            params = raw
        self.params = {
            name: arr if isinstance(arr, Tensor) else Tensor(arr, requires_grad=name not in _FROZEN)
            for name, arr in params.items()
        }

    def trainable(self) -> dict:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    # ----- forward paths -------------------------------------------------

    def encode_frames(self, samples, mask: Optional[np.ndarray] = None) -> tuple:
        """Waveform -> (latent frames, conv features); see encoder module."""
        return encode_frames(samples, self.params, self.config.encoder, mask=mask)

    def quantize(self, frames: Tensor, domain: Optional[Domain] = None) -> tuple:
        return quantize(
            frames,
            self.params,
            self.config.quantizer,
            domain=domain,
            frame_rate=self.config.tokens_per_second,
            sample_rate=self.config.sample_rate,
        )

    def decode_frames(self, quantized: Tensor) -> Tensor:
        return decode(quantized, self.params, self.config.decoder)

    def conv_features(self, samples) -> Tensor:
        return conv_encode(samples, self.params, self.config.encoder)

    def encode(self, clip: AudioClip, domain: Optional[Domain] = None) -> TokenStream:
        """Clip (already at the codec rate) -> token stream."""
        if clip.sample_rate != self.config.sample_rate:
            raise ValueError(
                f"clip rate {clip.sample_rate} != codec rate {self.config.sample_rate}; resample first"
            )
        frames, _ = self.encode_frames(clip.samples.astype(self.dtype))
        stream, _ = self.quantize(frames, domain=domain)
        return stream

    def decode_tokens(self, stream: TokenStream) -> AudioClip:
        codewords = simvq_embed(stream.ids, self.params)
        wave = self.decode_frames(codewords)
        return AudioClip(
            samples=np.asarray(wave.data, dtype=np.float64), sample_rate=self.config.sample_rate
        )

    def reconstruct(self, clip: AudioClip, domain: Optional[Domain] = None) -> AudioClip:
        return self.decode_tokens(self.encode(clip, domain=domain))

    # ----- persistence ----------------------------------------------------

    def state_arrays(self) -> dict:
        """Parameters plus the config (as JSON bytes) for checkpointing."""
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        cfg_json = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        out["meta/config_json"] = np.frombuffer(cfg_json, dtype=np.uint8).copy()
        return out

    def save(self, path) -> None:
        ckpt.save_tensors(path, self.state_arrays())

    @classmethod
    def load(cls, path) -> "Codec":
        arrays = ckpt.load_tensors(path)
        if "meta/config_json" not in arrays:
            raise ckpt.CheckpointError(f"{path}: checkpoint lacks an embedded model config")
        config = CodecConfig.from_dict(json.loads(arrays["meta/config_json"].tobytes().decode("utf-8")))
        params = {
            k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")
        }
        dtype = params["enc.conv0.w"].dtype
        return cls(config, dtype=dtype, params=params)
