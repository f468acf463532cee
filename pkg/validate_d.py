"""base_mean sweep: does a shared base-embedding mean fix assignment collapse?"""

import shutil
import time
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from tricodec.losses import ContrastiveConfig, MaskSpec, mel_distance
from tricodec.model import Codec, CodecConfig
from tricodec.signal import AudioClip, gen_toy_dataset
from tricodec.training import StageConfig, dataset_contrastive_loss, train_stage

OUT = Path("/root/pkg/validate_d_results.txt")
train_clips = gen_toy_dataset(7, 4, 1.0)
held_clips = gen_toy_dataset(8, 4, 1.0)


def eval_mel(codec):
    vals = []
    for clip in held_clips:
        n = (len(clip.samples) // 320) * 320
        c = AudioClip(clip.samples[:n], clip.sample_rate, clip.domain)
        vals.append(mel_distance(c, codec.reconstruct(c)))
    return float(np.mean(vals))


def distinct_cw(codec):
    counts = []
    for clip in train_clips:
        n = (len(clip.samples) // 320) * 320
        frames, _ = codec.encode_frames(clip.samples[:n].astype(codec.dtype))
        ids, _ = codec.quantize(frames, domain=clip.domain)
        counts.append(len(np.unique(ids.ids)))
    return float(np.mean(counts))


lines = []


def log(s):
    lines.append(s)
    print(s, flush=True)
    OUT.write_text("\n".join(lines) + "\n")


for mean in [0.0, 4.0]:
    cfg = CodecConfig.toy()
    cfg = dc_replace(cfg, quantizer=dc_replace(cfg.quantizer, base_std=1.0, base_mean=mean))
    run = Path(f"/tmp/vd/m{mean}")
    if run.exists():
        shutil.rmtree(run)
    t0 = time.time()
    acfg = StageConfig.acoustic(
        steps=500, batch_size=2, seed=0, lr=1e-3, lr_min=1e-4, checkpoint_every=250
    )
    res = train_stage(train_clips, acfg, run / "a3", model_config=cfg)
    ratio = res.final_recon / res.step0_recon
    mels = []
    for p in ["ckpt_step0.tckp", "ckpt_step250.tckp", "ckpt_final.tckp"]:
        mels.append(eval_mel(Codec.load(run / "a3" / p)))
    viol = sum(1 for a, b in zip(mels, mels[1:]) if b > a)
    final = Codec.load(res.final_checkpoint)
    cw = distinct_cw(final)
    log(
        f"mean={mean}: A3 ratio {ratio:.4f} [<=0.5] mel {mels[0]:.3f}/{mels[1]:.3f}/{mels[2]:.3f} "
        f"viol={viol} [<=1] cw {cw:.1f} ({(time.time() - t0) / 60:.1f} min)"
    )
    if ratio > 0.5 or viol > 1:
        continue
    for beta, lam_c in [(0.25, 50.0), (0.25, 1.0)]:
        t1 = time.time()
        scfg = StageConfig.semantic(
            steps=200, batch_size=2, seed=0, lr=5e-4, lr_min=5e-5, lam_c=lam_c,
            beta_commit=beta, mask=MaskSpec(p=0.1, span=5),
            contrastive=ContrastiveConfig(n_distractors=16),
        )
        sres = train_stage(
            train_clips, scfg, run / f"sem_b{beta}_c{lam_c}", init_from=res.final_checkpoint
        )
        sc = Codec.load(sres.final_checkpoint)
        lm = dataset_contrastive_loss(
            sc, train_clips, MaskSpec(), ContrastiveConfig(n_distractors=16), seed=0
        )
        mel1 = eval_mel(sc)
        log(
            f"  sem beta={beta} lam_c={lam_c}: L_m {lm:.4f} [<2.3332] mel {mel1:.3f} "
            f"x{mel1 / mels[2]:.3f} [<1.20] cw {distinct_cw(sc):.1f} ({(time.time() - t1) / 60:.1f} min)"
        )

log("done")
