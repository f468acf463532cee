"""Single-codebook vector quantizer with domain-partitioned index regions
and a linear codebook reparameterization.

The codebook is a frozen Gaussian base matrix composed with one trainable
linear projection (no bias): effective codeword i = projection @ base[i].
Index regions reserve [0, 4096) for speech, [4096, 8192) for music, and
[8192, 16384) for sound; training restricts nearest-neighbor search to the
input's region, evaluation searches the whole book.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, gather_rows, matmul, mul, passthrough, stop_gradient, sub, tmean, transpose, tsum
from .signal import Domain

__all__ = [
    "QuantizerConfig",
    "TokenStream",
    "TokenStreamError",
    "init_quantizer_params",
    "effective_codewords",
    "simvq_embed",
    "quantize",
    "commitment_loss",
    "alignment_loss",
    "utilization",
    "save_tokens",
    "load_tokens",
    "region_of_id",
]

TOKEN_MAGIC = b"UCTK"
TOKEN_VERSION = 1


@dataclass(frozen=True)
class QuantizerConfig:
    codebook_size: int = 16384
    hidden: int = 512
    speech_end: int = 4096
    music_end: int = 8192
    base_std: float = 1.0
    base_mean: float = 4.0

    def __post_init__(self):
        if not (0 < self.speech_end < self.music_end < self.codebook_size):
            raise ValueError(
                f"region boundaries must satisfy 0 < {self.speech_end} < "
                f"{self.music_end} < {self.codebook_size}"
            )
        if self.base_std <= 0:
            raise ValueError(f"base_std must be positive, got {self.base_std}")
        if self.base_mean < 0:
            raise ValueError(f"base_mean must be nonnegative, got {self.base_mean}")

    def region(self, domain: Domain) -> tuple:
        """Half-open index range [start, end) for a domain."""
        if domain == Domain.SPEECH:
            return (0, self.speech_end)
        if domain == Domain.MUSIC:
            return (self.speech_end, self.music_end)
        return (self.music_end, self.codebook_size)


def region_of_id(cfg: QuantizerConfig, idx: int) -> Domain:
    if not 0 <= idx < cfg.codebook_size:
        raise IndexError(f"id {idx} outside codebook [0, {cfg.codebook_size})")
    if idx < cfg.speech_end:
        return Domain.SPEECH
    if idx < cfg.music_end:
        return Domain.MUSIC
    return Domain.SOUND


@dataclass
class TokenStream:
    """Codebook indices at a fixed frame rate; one token per frame."""

    ids: np.ndarray
    frame_rate: int = 75
    source_sample_rate: int = 24000
    codebook_size: int = 16384

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError(f"ids must be 1-D, got shape {ids.shape}")
        if len(ids) and (ids.min() < 0 or ids.max() >= self.codebook_size):
            raise ValueError(
                f"ids out of range [0, {self.codebook_size}): min {ids.min()}, max {ids.max()}"
            )
        self.ids = ids

    def __len__(self):
        return len(self.ids)


def init_quantizer_params(cfg: QuantizerConfig, rng: np.random.Generator, dtype=np.float64) -> dict:
    """Base embeddings are Gaussian with a shared mean of norm ``base_mean``
    (along a direction drawn once per init) plus i.i.d. noise of std
    ``base_std``; they stay frozen. The projection starts at identity so
    initial codewords equal the base rows.

    The shared mean matters for trainability: every selected codeword's
    projection gradient has a component along it, so projection @ mean acts
    as a global codeword offset that accumulates coherent updates each step.
    That lets training slide the whole codebook into the encoder's frame
    cloud, where small nearest-neighbor margins keep many entries in use,
    instead of a handful of entries capturing every frame."""
    direction = rng.normal(0.0, 1.0, cfg.hidden)
    direction /= np.linalg.norm(direction)
    base = cfg.base_mean * direction + rng.normal(0.0, cfg.base_std, (cfg.codebook_size, cfg.hidden))
    return {
        "vq.base": base.astype(dtype),
        "vq.proj": np.eye(cfg.hidden).astype(dtype),
    }


def effective_codewords(params: dict) -> Tensor:
    """All effective codewords, shape (codebook_size, hidden)."""
    return matmul(params["vq.base"], transpose(params["vq.proj"]))


def simvq_embed(ids, params: dict) -> Tensor:
    """Effective codeword(s) for ``ids``: projection applied to base rows.

    Gradients reach only the projection; the base matrix is frozen.
    """
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= params["vq.base"].shape[0]):
        raise IndexError(
            f"codebook id out of range [0, {params['vq.base'].shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    return matmul(gather_rows(params["vq.base"], ids), transpose(params["vq.proj"]))


def quantize(
    frames: Tensor,
    params: dict,
    cfg: QuantizerConfig,
    domain: Optional[Domain] = None,
    frame_rate: int = 75,
    sample_rate: int = 24000,
) -> tuple:
    """Nearest-codeword assignment under squared Euclidean distance.

    Without a domain the whole book is searched; with one, only that
    domain's region. Ties break toward the lowest id. Returns
    (TokenStream, quantized frames); the quantized frames carry an
    identity-gradient passthrough, so encoder frames and selected
    codewords both receive the downstream gradient.
    """
    eff = effective_codewords(params)
    lo, hi = (0, cfg.codebook_size) if domain is None else cfg.region(domain)
    book = eff.data[lo:hi].astype(np.float64)
    f = frames.data.astype(np.float64)

    # expanded ||f - c||^2; the constant ||f||^2 term cannot change the argmin
    d = -2.0 * (f @ book.T) + np.sum(book * book, axis=1)[None, :]
    ids = lo + np.argmin(d, axis=1)  # first occurrence -> lowest id

    codewords = gather_rows(eff, ids)
    quantized = passthrough(frames, codewords)
    stream = TokenStream(
        ids=ids,
        frame_rate=frame_rate,
        source_sample_rate=sample_rate,
        codebook_size=cfg.codebook_size,
    )
    return stream, quantized


def commitment_loss(frames: Tensor, quantized: Tensor, beta: float = 0.25) -> Tensor:
    """beta * mean over frames of squared distance to the (stop-gradient)
    quantized frames: zero iff every frame already sits on its codeword."""
    diff = sub(frames, stop_gradient(quantized))
    per_frame = tsum(mul(diff, diff), axis=-1)
    return mul(tmean(per_frame), Tensor(np.asarray(beta, dtype=frames.dtype)))


def alignment_loss(frames: Tensor, codewords: Tensor) -> Tensor:
    """Mean squared distance from selected codewords to their (stop-gradient)
    frames: the counterpart of commitment_loss that trains the codebook side.

    ``codewords`` must be the gathered effective codewords (simvq_embed of
    the emitted ids), not the straight-through quantized frames, so the
    gradient reaches only the projection. Pulling selected codewords toward
    the frames they serve drags the whole projected book into the encoder's
    frame cloud; without this force the projection only sees reconstruction
    gradients gathered onto the few selected rows, assignments freeze, and
    the book degenerates to a handful of live entries."""
    diff = sub(codewords, stop_gradient(frames))
    return tmean(tsum(mul(diff, diff), axis=-1))


def utilization(streams: Sequence[TokenStream], cfg: QuantizerConfig, domain: Optional[Domain] = None) -> float:
    """Distinct ids observed divided by region size (whole book if no domain)."""
    if not streams:
        raise ValueError("utilization requires at least one token stream")
    all_ids = np.concatenate([s.ids for s in streams]) if streams else np.empty(0, np.int64)
    lo, hi = (0, cfg.codebook_size) if domain is None else cfg.region(domain)
    in_region = all_ids[(all_ids >= lo) & (all_ids < hi)]
    return len(np.unique(in_region)) / (hi - lo)


class TokenStreamError(Exception):
    pass


def save_tokens(path, stream: TokenStream) -> None:
    """Header: magic 'UCTK', u32 version, u32 sample rate, u32 frame rate,
    u32 codebook size, u64 count; then little-endian u16 ids."""
    if stream.codebook_size > 0x10000:
        raise TokenStreamError(f"codebook size {stream.codebook_size} does not fit u16 ids")
    header = TOKEN_MAGIC + struct.pack(
        "<IIIIQ",
        TOKEN_VERSION,
        stream.source_sample_rate,
        stream.frame_rate,
        stream.codebook_size,
        len(stream.ids),
    )
    Path(path).write_bytes(header + stream.ids.astype("<u2").tobytes())


def load_tokens(path) -> TokenStream:
    raw = Path(path).read_bytes()
    if len(raw) < 28:
        raise TokenStreamError(f"{path}: too short for a token stream header")
    if raw[:4] != TOKEN_MAGIC:
        raise TokenStreamError(f"{path}: bad magic {raw[:4]!r}, expected {TOKEN_MAGIC!r}")
    version, rate, frame_rate, book, count = struct.unpack_from("<IIIIQ", raw, 4)
    if version != TOKEN_VERSION:
        raise TokenStreamError(f"{path}: unsupported version {version}, expected {TOKEN_VERSION}")
    payload = raw[28:]
    if len(payload) != 2 * count:
        raise TokenStreamError(f"{path}: expected {count} ids, payload holds {len(payload) // 2}")
    ids = np.frombuffer(payload, dtype="<u2").astype(np.int64)
    return TokenStream(ids=ids, frame_rate=frame_rate, source_sample_rate=rate, codebook_size=book)
