"""Three-stage training: acoustic (reconstruction + commitment), semantic
(adds masked contrastive), fine-tune (reconstruction-heavy on curated
speech). AdamW with decoupled weight decay, cosine learning-rate decay,
domain-routed codebook regions, JSONL metric logs, and byte-deterministic
checkpointing (atomic writes, serialized RNG state).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .autodiff import NonFiniteError, Tensor, add, backward, mul
from .losses import (
    ContrastiveConfig,
    MaskSpec,
    contrastive_loss,
    reconstruction_terms,
    sample_mask,
)
from .model import Codec, CodecConfig
from .quantizer import alignment_loss, commitment_loss, simvq_embed
from .signal import AudioClip, Domain, spectral_flatness

__all__ = [
    "Stage",
    "StageConfig",
    "TrainingError",
    "StageOrderError",
    "DivergenceError",
    "AdamW",
    "cosine_lr",
    "TrainResult",
    "train_stage",
    "curate_finetune",
    "dataset_recon_loss",
]


class TrainingError(Exception):
    pass


class StageOrderError(TrainingError):
    """Raised when a stage starts without the checkpoint lineage it needs."""


class DivergenceError(TrainingError):
    """Raised on non-finite loss or gradients; names the last good checkpoint."""


class Stage(enum.Enum):
    ACOUSTIC = 1
    SEMANTIC = 2
    FINETUNE = 3

    @classmethod
    def from_string(cls, s: str) -> "Stage":
        try:
            return cls[s.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown stage '{s}' (expected acoustic, semantic, or finetune)") from None


@dataclass(frozen=True)
class StageConfig:
    stage: Stage
    steps: int = 500
    batch_size: int = 2
    seed: int = 0
    lr: float = 2e-4
    lr_min: float = 1e-6
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    lam_mel: float = 45.0
    lam_c: float = 1.0
    beta_commit: float = 0.25
    lam_align: float = 1.0
    freeze_encoder_steps: int = 0
    warm_start: bool = True
    enable_mask: bool = False
    enable_contrastive: bool = False
    mask: MaskSpec = field(default_factory=MaskSpec)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    max_clip_seconds: float = 10.0
    checkpoint_every: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.freeze_encoder_steps < 0:
            raise ValueError("freeze_encoder_steps must be >= 0")
        if self.stage == Stage.ACOUSTIC and (self.enable_mask or self.enable_contrastive):
            raise ValueError("acoustic stage must run without masking or contrastive loss")
        if self.stage == Stage.SEMANTIC and not (self.enable_mask and self.enable_contrastive):
            raise ValueError("semantic stage requires enable_mask and enable_contrastive")
        if self.stage == Stage.FINETUNE:
            if self.enable_mask or self.enable_contrastive:
                raise ValueError("finetune stage must run without masking or contrastive loss")
            if self.lam_mel != 450.0 or self.lr != 5e-5:
                raise ValueError("finetune stage is pinned to lam_mel=450 and lr=5e-5")

    @classmethod
    def acoustic(cls, **kw) -> "StageConfig":
        return cls(stage=Stage.ACOUSTIC, **kw)

    @classmethod
    def semantic(cls, **kw) -> "StageConfig":
        kw.setdefault("enable_mask", True)
        kw.setdefault("enable_contrastive", True)
        return cls(stage=Stage.SEMANTIC, **kw)

    @classmethod
    def finetune(cls, **kw) -> "StageConfig":
        kw.setdefault("lam_mel", 450.0)
        kw.setdefault("lr", 5e-5)
        return cls(stage=Stage.FINETUNE, **kw)


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """lr_min + 0.5*(lr0 - lr_min)*(1 + cos(pi*step/total_steps))."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * step / total_steps))


class AdamW:
    """AdamW with bias-corrected moments and decoupled weight decay.

    Parameters whose gradient is absent in a step are treated as having a
    zero gradient: their moments decay and weight decay still applies.
    """

    def __init__(self, params: dict, betas=(0.9, 0.999), weight_decay: float = 0.01, eps: float = 1e-8):
        self.params = {k: v for k, v in params.items() if v.requires_grad}
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def step(self, lr: float, freeze: tuple = ()) -> None:
        """Apply one update; parameters whose name starts with a prefix in
        ``freeze`` are left entirely untouched (no moments, no decay)."""
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if freeze and name.startswith(freeze):
                continue
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for '{name}' at optimizer step {self.t}")
            g = g.astype(p.data.dtype, copy=False)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            new = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
            # keep the parameter dtype; a float64 lr must not promote float32 weights
            p.data = new.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# RNG state serialization (PCG64)


def _rng_to_u64(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    s, inc = st["state"]["state"], st["state"]["inc"]
    mask = (1 << 64) - 1
    return np.array(
        [s & mask, s >> 64, inc & mask, inc >> 64, st["has_uint32"], st["uinteger"]],
        dtype=np.uint64,
    )


def _rng_from_u64(vals: np.ndarray) -> np.random.Generator:
    v = [int(x) for x in vals]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": v[0] | (v[1] << 64), "inc": v[2] | (v[3] << 64)},
        "has_uint32": v[4],
        "uinteger": v[5],
    }
    return rng


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    final_checkpoint: Path
    log_path: Path
    checkpoints: list
    step0_recon: float
    final_recon: float


def _save_state(
    path: Path,
    codec: Codec,
    opt: AdamW,
    rng: np.random.Generator,
    step: int,
    stage_done: int,
    stage_in_progress: int,
) -> None:
    arrays = codec.state_arrays()
    for name in opt.params:
        arrays[f"adam_m/{name}"] = opt.m[name]
        arrays[f"adam_v/{name}"] = opt.v[name]
    arrays["meta/adam_t"] = np.asarray(opt.t, dtype=np.int64)
    arrays["meta/step"] = np.asarray(step, dtype=np.int64)
    arrays["meta/stage_done"] = np.asarray(stage_done, dtype=np.int64)
    arrays["meta/stage_in_progress"] = np.asarray(stage_in_progress, dtype=np.int64)
    arrays["meta/rng_state"] = _rng_to_u64(rng)
    ckpt.save_tensors(path, arrays)


def _truncate(clip: AudioClip, max_seconds: float, downsample: int) -> np.ndarray:
    n = min(len(clip.samples), int(max_seconds * clip.sample_rate))
    n = (n // downsample) * downsample
    if n < downsample:
        raise ValueError(f"clip too short to train on: {len(clip.samples)} samples")
    return clip.samples[:n]


def _sample_losses(codec: Codec, clip: AudioClip, cfg: StageConfig, rng: np.random.Generator) -> dict:
    """Forward pass and loss terms for one clip. Quantization is restricted
    to the clip's domain region (training always has domain labels)."""
    if clip.domain is None:
        raise TrainingError("training clips must carry a domain label")
    x = _truncate(clip, cfg.max_clip_seconds, codec.config.downsample).astype(codec.dtype)

    maskset = None
    if cfg.enable_mask:
        n_frames = len(x) // codec.config.downsample
        maskset = sample_mask(n_frames, cfg.mask, rng)

    frames, conv_feats = codec.encode_frames(x, mask=maskset.mask if maskset else None)
    stream, quantized = codec.quantize(frames, domain=clip.domain)
    wave = codec.decode_frames(quantized)

    time_l1, mel_l1 = reconstruction_terms(Tensor(x), wave, sample_rate=codec.config.sample_rate)
    recon = add(time_l1, mul(Tensor(np.asarray(cfg.lam_mel, dtype=codec.dtype)), mel_l1))
    commit = commitment_loss(frames, quantized, beta=cfg.beta_commit)
    align = mul(
        Tensor(np.asarray(cfg.lam_align, dtype=codec.dtype)),
        alignment_loss(frames, simvq_embed(stream.ids, codec.params)),
    )
    total = add(recon, add(commit, align))

    terms = {
        "recon_time": time_l1,
        "recon_mel": mel_l1,
        "recon": recon,
        "commit": commit,
        "align": align,
    }
    if cfg.enable_contrastive:
        k_eff = min(cfg.contrastive.n_distractors, maskset.count - 1)
        if k_eff < 1:
            raise TrainingError(
                f"only {maskset.count} masked frames; clip too short for contrastive training"
            )
        ccfg = replace(cfg.contrastive, n_distractors=k_eff)
        lm = contrastive_loss(quantized, conv_feats, maskset, ccfg, rng)
        terms["contrastive"] = lm
        total = add(total, mul(Tensor(np.asarray(cfg.lam_c, dtype=codec.dtype)), lm))
    terms["loss"] = total
    return terms


def dataset_recon_loss(codec: Codec, clips: Sequence[AudioClip], cfg: StageConfig) -> float:
    """Mean reconstruction loss (time + lam_mel*mel) over all clips,
    domain-quantized, no masking. Deterministic; used for trend checks."""
    vals = []
    for clip in clips:
        x = _truncate(clip, cfg.max_clip_seconds, codec.config.downsample).astype(codec.dtype)
        frames, _ = codec.encode_frames(x)
        _, quantized = codec.quantize(frames, domain=clip.domain)
        wave = codec.decode_frames(quantized)
        time_l1, mel_l1 = reconstruction_terms(Tensor(x), wave, sample_rate=codec.config.sample_rate)
        vals.append(float(time_l1.data) + cfg.lam_mel * float(mel_l1.data))
    return float(np.mean(vals))


def dataset_contrastive_loss(
    codec: Codec,
    clips: Sequence[AudioClip],
    mask: MaskSpec,
    contrastive: ContrastiveConfig,
    seed: int = 0,
    max_clip_seconds: float = 10.0,
) -> float:
    """Mean masked-contrastive loss over all clips with a fixed mask seed.

    Deterministic given (model, clips, seed); used to measure how well masked
    positions identify their own unmasked conv feature among distractors."""
    rng = np.random.default_rng(seed)
    vals = []
    for clip in clips:
        x = _truncate(clip, max_clip_seconds, codec.config.downsample).astype(codec.dtype)
        maskset = sample_mask(len(x) // codec.config.downsample, mask, rng)
        frames, conv_feats = codec.encode_frames(x, mask=maskset.mask)
        _, quantized = codec.quantize(frames, domain=clip.domain)
        k_eff = min(contrastive.n_distractors, maskset.count - 1)
        if k_eff < 1:
            raise TrainingError(
                f"only {maskset.count} masked frames; clip too short for contrastive eval"
            )
        ccfg = replace(contrastive, n_distractors=k_eff)
        vals.append(float(contrastive_loss(quantized, conv_feats, maskset, ccfg, rng).data))
    return float(np.mean(vals))


def _warm_start_projection(codec: Codec, clips: Sequence[AudioClip], cfg: StageConfig) -> None:
    """Fit the codebook projection to the untrained encoder's frame cloud.

    Random base rows from each domain's region are paired with frames
    encoded from that domain's clips, and the projection is replaced by the
    least-squares map sending paired rows onto their frames. Codewords then
    start inside the cloud their region serves, so nearest-neighbor
    assignments spread over many entries from the first step. Without this,
    isotropic random codewords barely project onto the low-rank subspace
    the frames occupy, a handful of entries win every frame, and gradient
    descent never recruits the rest (selection is not differentiable).
    Deterministic given the stage seed."""
    qcfg = codec.config.quantizer
    rng = np.random.default_rng((cfg.seed, 0x779A))
    by_domain: dict = {}
    for clip in clips:
        if clip.domain is None:
            raise TrainingError("training clips must carry a domain label")
        x = _truncate(clip, cfg.max_clip_seconds, codec.config.downsample).astype(codec.dtype)
        f, _ = codec.encode_frames(x)
        by_domain.setdefault(clip.domain, []).append(f.data)
    base = codec.params["vq.base"].data
    rows, targets = [], []
    for domain, flist in by_domain.items():
        frames = np.concatenate(flist, axis=0)
        lo, hi = qcfg.region(domain)
        k = min(hi - lo, max(qcfg.hidden, 4 * qcfg.hidden * (hi - lo) // qcfg.codebook_size))
        sel = rng.choice(np.arange(lo, hi), size=k, replace=False)
        fsel = rng.choice(len(frames), size=k, replace=len(frames) < k)
        rows.append(base[sel])
        targets.append(frames[fsel])
    b = np.concatenate(rows, axis=0)
    t = np.concatenate(targets, axis=0)
    # codeword_i = proj @ base_i, so solve (b @ proj.T ~ t) in least squares
    fit, *_ = np.linalg.lstsq(b, t, rcond=None)
    codec.params["vq.proj"].data[...] = fit.T.astype(codec.dtype)


def train_stage(
    clips: Sequence[AudioClip],
    cfg: StageConfig,
    run_dir,
    model_config: Optional[CodecConfig] = None,
    init_from=None,
) -> TrainResult:
    """Run one training stage to completion and return checkpoint paths.

    Fresh runs require ``model_config`` (acoustic stage only); semantic and
    finetune stages must resume from a checkpoint whose lineage includes a
    completed acoustic stage. If ``init_from`` is a checkpoint of this same
    stage interrupted mid-run, training resumes bit-exactly.
    """
    if not clips:
        raise TrainingError("empty training set")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "train_log.jsonl"

    stage_done = 0
    start_step = 0
    opt = None
    rng = None
    if init_from is not None:
        arrays = ckpt.load_tensors(init_from)
        codec = Codec.load(init_from)
        stage_done = int(arrays.get("meta/stage_done", np.asarray(0)))
        in_progress = int(arrays.get("meta/stage_in_progress", np.asarray(0)))
        saved_step = int(arrays.get("meta/step", np.asarray(0)))
        if in_progress == cfg.stage.value and saved_step < cfg.steps:
            # mid-stage resume: restore optimizer moments and RNG exactly
            opt = AdamW(codec.trainable(), betas=cfg.betas, weight_decay=cfg.weight_decay)
            for name in opt.params:
                opt.m[name] = arrays[f"adam_m/{name}"].copy()
                opt.v[name] = arrays[f"adam_v/{name}"].copy()
            opt.t = int(arrays["meta/adam_t"])
            rng = _rng_from_u64(arrays["meta/rng_state"])
            start_step = saved_step
    else:
        if cfg.stage != Stage.ACOUSTIC:
            raise StageOrderError(
                f"{cfg.stage.name.lower()} stage requires an initial checkpoint from a completed "
                f"acoustic stage; train acoustic first"
            )
        if model_config is None:
            raise TrainingError("fresh training requires a model config")
        codec = Codec(model_config, seed=cfg.seed)
        if cfg.warm_start:
            _warm_start_projection(codec, clips, cfg)

    if cfg.stage in (Stage.SEMANTIC, Stage.FINETUNE) and init_from is not None:
        if stage_done < Stage.ACOUSTIC.value:
            raise StageOrderError(
                f"{cfg.stage.name.lower()} stage requires a checkpoint with a completed acoustic "
                f"stage; got one at stage_done={stage_done}"
            )
    if opt is None:
        opt = AdamW(codec.trainable(), betas=cfg.betas, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng(cfg.seed)

    step0_recon = dataset_recon_loss(codec, clips, cfg)
    checkpoints = []
    last_good = None
    if cfg.checkpoint_every > 0 and start_step == 0:
        p = run_dir / "ckpt_step0.tckp"
        _save_state(p, codec, opt, rng, 0, stage_done, cfg.stage.value)
        checkpoints.append(p)
        last_good = p

    log_f = open(log_path, "a")
    try:
        for step in range(start_step, cfg.steps):
            lr_t = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
            batch_idx = rng.integers(0, len(clips), size=cfg.batch_size)
            opt.zero_grad()
            try:
                batch_terms = [_sample_losses(codec, clips[i], cfg, rng) for i in batch_idx]
                inv = Tensor(np.asarray(1.0 / cfg.batch_size, dtype=codec.dtype))
                batch_loss = None
                for terms in batch_terms:
                    contrib = mul(terms["loss"], inv)
                    batch_loss = contrib if batch_loss is None else add(batch_loss, contrib)
                if not np.isfinite(batch_loss.data):
                    raise NonFiniteError("batch loss is not finite")
                backward(batch_loss)
                # early hold on the analysis side lets the synthesis side learn
                # to exploit a still-diverse frame cloud before both move jointly
                frozen = ("enc.",) if step < cfg.freeze_encoder_steps else ()
                opt.step(lr_t, freeze=frozen)
            except NonFiniteError as e:
                raise DivergenceError(
                    f"training diverged at step {step}: {e}; last good checkpoint: "
                    f"{last_good if last_good else 'none saved'}"
                ) from e

            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                record = {
                    "step": step,
                    "stage": cfg.stage.name.lower(),
                    "lr": float(lr_t),
                    "loss": float(batch_loss.data),
                }
                for key in ("recon", "recon_time", "recon_mel", "commit", "align", "contrastive"):
                    vals = [float(t[key].data) for t in batch_terms if key in t]
                    if vals:
                        record[key] = float(np.mean(vals))
                log_f.write(json.dumps(record) + "\n")
                log_f.flush()

            if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0 and (step + 1) < cfg.steps:
                p = run_dir / f"ckpt_step{step + 1}.tckp"
                _save_state(p, codec, opt, rng, step + 1, stage_done, cfg.stage.value)
                checkpoints.append(p)
                last_good = p
    finally:
        log_f.close()

    final = run_dir / "ckpt_final.tckp"
    _save_state(
        final, codec, opt, rng, cfg.steps, max(stage_done, cfg.stage.value), 0
    )
    checkpoints.append(final)
    final_recon = dataset_recon_loss(codec, clips, cfg)
    return TrainResult(
        final_checkpoint=final,
        log_path=log_path,
        checkpoints=checkpoints,
        step0_recon=step0_recon,
        final_recon=final_recon,
    )


def curate_finetune(clips: Sequence[AudioClip], fraction: float = 0.5) -> list:
    """Fine-tune subset: the most harmonic (lowest spectral-flatness) speech
    clips, the toy-scale stand-in for a curated high-quality speech corpus."""
    speech = [c for c in clips if c.domain == Domain.SPEECH]
    if not speech:
        raise TrainingError("no speech clips available for fine-tune curation")
    ranked = sorted(speech, key=spectral_flatness)
    keep = max(1, int(round(fraction * len(ranked))))
    return ranked[:keep]
