"""Training objectives and evaluation distances: span masking, the masked
contrastive loss, time+mel reconstruction loss (differentiable), and
metric-grade mel/STFT distances (plain numpy).

Random choices (mask starts, distractors) come from an explicit numpy
Generator owned by the caller, keeping every sampling decision replayable.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import (
    Tensor,
    add,
    cosine_similarity,
    div,
    gather_rows,
    logsumexp,
    matmul,
    mul,
    reshape,
    sub,
    tabs,
    tmean,
    tsqrt,
)
from .signal import DEFAULT_MEL, AudioClip, MelConfig, StftConfig, mel_filterbank, mel_spectrogram, stft_magnitude

__all__ = [
    "MaskSpec",
    "MaskSet",
    "ContrastiveConfig",
    "sample_mask",
    "contrastive_loss",
    "reconstruction_terms",
    "reconstruction_loss",
    "mel_distance",
    "stft_distance",
]


@dataclass(frozen=True)
class MaskSpec:
    p: float = 0.1
    span: int = 5

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise ValueError(f"mask proportion p must be in (0, 1), got {self.p}")
        if self.span < 1:
            raise ValueError(f"mask span must be >= 1, got {self.span}")


@dataclass
class MaskSet:
    mask: np.ndarray   # bool per frame
    starts: np.ndarray

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def sample_mask(T: int, spec: MaskSpec, rng: np.random.Generator) -> MaskSet:
    """Draw round(p*T) start indices (floored at 1) uniformly without
    replacement; each start masks frames [s, min(s+span, T)). Spans may
    overlap."""
    if T < 1:
        raise ValueError(f"frame count must be >= 1, got {T}")
    n_starts = min(T, max(1, int(round(spec.p * T))))
    starts = rng.choice(T, size=n_starts, replace=False)
    mask = np.zeros(T, dtype=bool)
    for s in starts:
        mask[s : s + spec.span] = True
    return MaskSet(mask=mask, starts=starts)


@dataclass(frozen=True)
class ContrastiveConfig:
    n_distractors: int = 100
    temperature: float = 0.1
    divide_by_count: bool = False  # use the distractor count itself as the divisor

    def __post_init__(self):
        if self.n_distractors < 1:
            raise ValueError(f"n_distractors must be >= 1, got {self.n_distractors}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def contrastive_loss(
    q: Tensor, c: Tensor, mask: MaskSet, cfg: ContrastiveConfig, rng: np.random.Generator
) -> Tensor:
    """Identify the true conv latent among distractors, per masked step.

    For each masked step t the candidate set is c_t plus K latents drawn
    uniformly (without replacement) from the *other* masked steps; the loss
    is -log softmax over cosine similarities divided by the temperature,
    averaged over masked steps. Equal similarities give exactly log(K+1).
    """
    idx = np.nonzero(mask.mask)[0]
    m = len(idx)
    k = cfg.n_distractors
    if m < k + 1:
        raise ValueError(
            f"contrastive loss needs more masked steps ({m}) than distractors ({k}); "
            f"use longer inputs or fewer distractors"
        )
    cand = np.empty((m, k + 1), dtype=np.int64)
    cand[:, 0] = idx
    for row, t in enumerate(idx):
        others = idx[idx != t]
        cand[row, 1:] = rng.choice(others, size=k, replace=False)

    q_m = reshape(gather_rows(q, idx), (m, 1, q.shape[1]))
    c_cand = reshape(gather_rows(c, cand.reshape(-1)), (m, k + 1, c.shape[1]))
    sims = cosine_similarity(q_m, c_cand, axis=-1)           # (m, k+1)
    divisor = float(k) if cfg.divide_by_count else cfg.temperature
    logits = div(sims, Tensor(np.asarray(divisor, dtype=q.dtype)))
    per_step = sub(logsumexp(logits, axis=-1), logits[:, 0])
    return tmean(per_step)


# ---------------------------------------------------------------------------
# differentiable reconstruction loss


@lru_cache(maxsize=8)
def _dft_tables(fft_size: int, dtype_name: str) -> tuple:
    n = np.arange(fft_size)[:, None]
    k = np.arange(fft_size // 2 + 1)[None, :]
    ang = 2.0 * np.pi * n * k / fft_size
    dt = np.dtype(dtype_name)
    return (
        np.cos(ang).astype(dt),
        (-np.sin(ang)).astype(dt),
        np.hanning(fft_size).astype(dt),
    )


def _mel_tensor(x: Tensor, sample_rate: int, cfg: MelConfig) -> Tensor:
    """Mel magnitude frames of a waveform Tensor, differentiable; shape
    (frames, n_mels). Magnitude uses sqrt(re^2 + im^2 + 1e-12) to stay
    smooth at silent bins."""
    fft, hop = cfg.stft.fft_size, cfg.stft.hop
    T = x.shape[0]
    n_frames = (T - fft) // hop + 1
    idx = np.arange(n_frames)[:, None] * hop + np.arange(fft)[None, :]
    cos_t, sin_t, window = _dft_tables(fft, x.dtype.name)
    frames = mul(gather_rows(x, idx), Tensor(window))
    re = matmul(frames, Tensor(cos_t))
    im = matmul(frames, Tensor(sin_t))
    mag = tsqrt(add(add(mul(re, re), mul(im, im)), Tensor(np.asarray(1e-12, dtype=x.dtype))))
    fb = mel_filterbank(sample_rate, fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    return matmul(mag, Tensor(fb.T.astype(x.dtype.name)))


def _as_wave_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, AudioClip):
        return Tensor(x.samples)
    return Tensor(np.asarray(x))


def reconstruction_terms(x, xhat, sample_rate: int = 24000, mel_cfg: MelConfig = DEFAULT_MEL) -> tuple:
    """(time-domain L1, mel-domain L1) between two waveforms, truncated to
    the shorter length. The mel term is zero for clips shorter than one
    analysis frame."""
    xt, yt = _as_wave_tensor(x), _as_wave_tensor(xhat)
    n = min(xt.shape[0], yt.shape[0])
    xt = xt[:n] if xt.shape[0] != n else xt
    yt = yt[:n] if yt.shape[0] != n else yt
    time_l1 = tmean(tabs(sub(xt, yt)))
    if n < mel_cfg.stft.fft_size:
        return time_l1, Tensor(np.zeros((), dtype=xt.dtype))
    mel_l1 = tmean(tabs(sub(_mel_tensor(xt, sample_rate, mel_cfg), _mel_tensor(yt, sample_rate, mel_cfg))))
    return time_l1, mel_l1


def reconstruction_loss(
    x, xhat, lam_mel: float = 45.0, sample_rate: int = 24000, mel_cfg: MelConfig = DEFAULT_MEL
) -> Tensor:
    """time L1 + lam_mel * mel L1."""
    time_l1, mel_l1 = reconstruction_terms(x, xhat, sample_rate, mel_cfg)
    lam = Tensor(np.asarray(lam_mel, dtype=time_l1.dtype))
    return add(time_l1, mul(lam, mel_l1))


# ---------------------------------------------------------------------------
# metric-grade distances (numpy, not differentiable)


def _matched_clips(x: AudioClip, xhat: AudioClip) -> tuple:
    if x.sample_rate != xhat.sample_rate:
        raise ValueError(f"sample rates differ: {x.sample_rate} vs {xhat.sample_rate}")
    n = min(len(x.samples), len(xhat.samples))
    return x.samples[:n], xhat.samples[:n], x.sample_rate


def mel_distance(x: AudioClip, xhat: AudioClip, cfg: MelConfig = DEFAULT_MEL) -> float:
    """Mean absolute difference of mel magnitude spectrograms."""
    a, b, sr = _matched_clips(x, xhat)
    ma = mel_spectrogram(AudioClip(a, sr), cfg)
    mb = mel_spectrogram(AudioClip(b, sr), cfg)
    return float(np.mean(np.abs(ma - mb)))


def stft_distance(x: AudioClip, xhat: AudioClip, scales: tuple = (512, 1024, 2048)) -> float:
    """Mean over FFT scales of the mean absolute magnitude difference; each
    scale uses hop = fft/4."""
    a, b, sr = _matched_clips(x, xhat)
    vals = []
    for fft in scales:
        cfg = StftConfig(fft_size=fft, hop=fft // 4)
        sa = stft_magnitude(AudioClip(a, sr), cfg)
        sb = stft_magnitude(AudioClip(b, sr), cfg)
        vals.append(np.mean(np.abs(sa - sb)))
    return float(np.mean(vals))
