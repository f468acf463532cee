"""Semantic sweep from the canonical A3 checkpoint: lr x mask.p, beta=0, lam_c=50."""

import shutil
import time
from pathlib import Path

import numpy as np

from tricodec.losses import ContrastiveConfig, MaskSpec, mel_distance
from tricodec.model import Codec
from tricodec.signal import gen_toy_dataset, load_wav
from tricodec.training import StageConfig, dataset_contrastive_loss, train_stage

A3_CKPT = Path("/tmp/a34val/a3/ckpt_final.tckp")
HELD = sorted(Path("/tmp/a34val/held").glob("*.wav"))
OUT = Path("/root/pkg/validate_a4e_results.txt")

train_clips = gen_toy_dataset(7, 4, 1.0)
held_clips = [load_wav(p) for p in HELD]


def eval_mel(codec):
    vals = []
    for clip in held_clips:
        n = (len(clip.samples) // 320) * 320
        from tricodec.signal import AudioClip

        c = AudioClip(clip.samples[:n], clip.sample_rate, clip.domain)
        vals.append(mel_distance(c, codec.reconstruct(c)))
    return float(np.mean(vals))


def distinct_cw(codec):
    counts = []
    for clip in train_clips:
        n = (len(clip.samples) // 320) * 320
        frames, _ = codec.encode_frames(clip.samples[:n].astype(codec.dtype))
        ids, _ = codec.quantize(frames, domain=clip.domain)
        counts.append(len(np.unique(ids)))
    return float(np.mean(counts))


lines = []
base = Codec.load(A3_CKPT)
mel0 = eval_mel(base)
lines.append(f"A3 ckpt: held mel {mel0:.4f}, distinct cw {distinct_cw(base):.1f}")
print(lines[-1], flush=True)

for lr, p in [(2e-3, 0.1), (5e-3, 0.1), (2e-3, 0.3), (5e-3, 0.3)]:
    t0 = time.time()
    run = Path(f"/tmp/a4e/lr{lr}_p{p}")
    if run.exists():
        shutil.rmtree(run)
    cfg = StageConfig.semantic(
        steps=200,
        seed=0,
        lr=lr,
        lr_min=lr / 10,
        lam_c=50.0,
        beta_commit=0.0,
        mask=MaskSpec(p=p, span=5),
        contrastive=ContrastiveConfig(n_distractors=16),
        checkpoint_every=0,
    )
    res = train_stage(train_clips, cfg, run, init_from=A3_CKPT)
    codec = Codec.load(res.final_checkpoint)
    lm = dataset_contrastive_loss(
        codec, train_clips, MaskSpec(p=p, span=5), ContrastiveConfig(n_distractors=16), seed=0
    )
    lm_default = dataset_contrastive_loss(
        codec, train_clips, MaskSpec(), ContrastiveConfig(n_distractors=16), seed=0
    )
    mel1 = eval_mel(codec)
    lines.append(
        f"lr={lr} p={p}: L_m(eval,p) {lm:.4f} / L_m(p=0.1) {lm_default:.4f} "
        f"[<2.3332]; mel {mel1:.4f} x{mel1 / mel0:.3f} [<1.20]; "
        f"cw {distinct_cw(codec):.1f} ({(time.time() - t0) / 60:.1f} min)"
    )
    print(lines[-1], flush=True)
    OUT.write_text("\n".join(lines) + "\n")

lines.append("done")
OUT.write_text("\n".join(lines) + "\n")
