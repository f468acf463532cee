"""Instrument collapse dynamics: cloud geometry, warm-start placement, and
per-step codeword usage / projection norms during a short acoustic run."""

from pathlib import Path

import numpy as np

from tricodec.model import Codec, CodecConfig
from tricodec.signal import gen_toy_dataset
from tricodec.training import StageConfig, _warm_start_projection, train_stage

train_clips = gen_toy_dataset(7, 4, 1.0)


def cloud_stats(codec, label):
    per_dom = {}
    for clip in train_clips:
        n = (len(clip.samples) // 320) * 320
        f, _ = codec.encode_frames(clip.samples[:n].astype(codec.dtype))
        per_dom.setdefault(clip.domain.value, []).append(f.data)
    for dom, fl in per_dom.items():
        F = np.concatenate(fl)
        mu = F.mean(0)
        C = F - mu
        ev = np.linalg.eigvalsh(C.T @ C / len(F))[::-1]
        print(
            f"  [{label}] {dom}: frames {F.shape}, |mu| {np.linalg.norm(mu):.2f}, "
            f"row-norm {np.linalg.norm(F, axis=1).mean():.2f}, "
            f"top-5 sqrt-eig {np.sqrt(ev[:5]).round(2)}, total-std {np.sqrt(ev.sum()):.2f}"
        )


def usage(codec):
    out = []
    for clip in train_clips:
        n = (len(clip.samples) // 320) * 320
        f, _ = codec.encode_frames(clip.samples[:n].astype(codec.dtype))
        s, q = codec.quantize(f, domain=clip.domain)
        gap = np.linalg.norm(q.data - f.data, axis=1).mean()
        out.append((len(np.unique(s.ids)), gap))
    cw = np.mean([o[0] for o in out])
    gap = np.mean([o[1] for o in out])
    return cw, gap


codec = Codec(CodecConfig.toy(), seed=0)
cloud_stats(codec, "untrained")
cw, gap = usage(codec)
print(f"before warm start: cw {cw:.1f}, |q-f| {gap:.2f}")
scfg = StageConfig.acoustic(steps=100, batch_size=2, seed=0, lr=1e-3, lr_min=1e-4)
_warm_start_projection(codec, train_clips, scfg)
cw, gap = usage(codec)
W = codec.params["vq.proj"].data
print(f"after warm start: cw {cw:.1f}, |q-f| {gap:.2f}, |W|_F {np.linalg.norm(W):.2f}")

run = Path("/tmp/diag_e")
import shutil

if run.exists():
    shutil.rmtree(run)

import tricodec.training as T

orig = T._sample_losses
step_box = {"n": 0}


def spy(codec_, clip, cfg, rng):
    return orig(codec_, clip, cfg, rng)


T._sample_losses = spy

res = None
for chunk in range(10):
    cfg = StageConfig.acoustic(
        steps=(chunk + 1) * 10, batch_size=2, seed=0, lr=1e-3, lr_min=1e-4,
        checkpoint_every=0,
    )
    if chunk == 0:
        res = train_stage(train_clips, cfg, run / f"c{chunk}", model_config=CodecConfig.toy())
    else:
        res = train_stage(train_clips, cfg, run / f"c{chunk}", init_from=res.final_checkpoint)
    c = Codec.load(res.final_checkpoint)
    cw, gap = usage(c)
    W = c.params["vq.proj"].data
    eff_norm = np.linalg.norm(c.params["vq.base"].data @ W.T, axis=1).mean()
    print(
        f"step {(chunk + 1) * 10:4d}: cw {cw:5.1f}  |q-f| {gap:6.2f}  |W|_F {np.linalg.norm(W):6.2f}  "
        f"|codeword| {eff_norm:6.2f}",
        flush=True,
    )
cloud_stats(Codec.load(res.final_checkpoint), "step100")
