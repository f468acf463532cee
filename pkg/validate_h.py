"""Arms: (1) final-norm affine frozen at identity, (2) bigger batch.
Both on the plain recipe; measures A3 gates + cw, then a big-lam_c semantic
arm from any acoustic passer."""

import shutil
import time
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

import tricodec.training as T
from tricodec.losses import ContrastiveConfig, MaskSpec, mel_distance
from tricodec.model import Codec, CodecConfig
from tricodec.signal import AudioClip, gen_toy_dataset
from tricodec.training import StageConfig, dataset_contrastive_loss, train_stage

OUT = Path("/root/pkg/validate_h_results.txt")
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


def cloud_std(codec):
    stds = []
    for clip in train_clips:
        n = (len(clip.samples) // 320) * 320
        frames, _ = codec.encode_frames(clip.samples[:n].astype(codec.dtype))
        stds.append(float(np.sqrt(frames.data.var(axis=0).sum())))
    return float(np.mean(stds))


def run_arm(name, batch, fixed_final_ln, beta=0.25, align=0.0, warm=False, mean=0.0):
    cfg = CodecConfig.toy()
    cfg = dc_replace(cfg, quantizer=dc_replace(cfg.quantizer, base_mean=mean))
    run = Path(f"/tmp/vh/{name}")
    if run.exists():
        shutil.rmtree(run)
    t0 = time.time()
    acfg = StageConfig.acoustic(
        steps=500, batch_size=batch, seed=0, lr=1e-3, lr_min=1e-4,
        beta_commit=beta, lam_align=align, warm_start=warm, checkpoint_every=250,
    )
    if fixed_final_ln:
        orig_init = Codec.__init__

        def patched(self, *a, **k):
            orig_init(self, *a, **k)
            for key in ("enc.final_ln.g", "enc.final_ln.b"):
                self.params[key].requires_grad = False

        Codec.__init__ = patched
    try:
        res = train_stage(train_clips, acfg, run / "a3", model_config=cfg)
    finally:
        if fixed_final_ln:
            Codec.__init__ = orig_init
    ratio = res.final_recon / res.step0_recon
    mels = [eval_mel(Codec.load(run / "a3" / p))
            for p in ["ckpt_step0.tckp", "ckpt_step250.tckp", "ckpt_final.tckp"]]
    viol = sum(1 for a, b in zip(mels, mels[1:]) if b > a)
    final = Codec.load(res.final_checkpoint)
    cw = distinct_cw(final)
    log(
        f"{name}: ratio {ratio:.4f} [<=0.5] mel {mels[0]:.3f}/{mels[1]:.3f}/{mels[2]:.3f} "
        f"viol={viol} cw {cw:.1f} std {cloud_std(final):.2f} ({(time.time() - t0) / 60:.1f} min)"
    )
    return res, mels[2]


for name, kw in [
    ("lnfix_b2", dict(batch=2, fixed_final_ln=True)),
    ("lnfix_b8", dict(batch=8, fixed_final_ln=True)),
    ("plain_b8", dict(batch=8, fixed_final_ln=False)),
    ("beta0_warm", dict(batch=2, fixed_final_ln=False, beta=0.0, align=1.0, warm=True, mean=4.0)),
    ("lnfix_warm", dict(batch=2, fixed_final_ln=True, beta=0.25, align=1.0, warm=True, mean=4.0)),
]:
    run_arm(name, **kw)

log("done")
