import time
from pathlib import Path

import numpy as np

from tricodec.cli import run_eval
from tricodec.losses import ContrastiveConfig, MaskSpec, sample_mask
from tricodec.model import Codec
from tricodec.signal import gen_toy_dataset
from tricodec.training import StageConfig, dataset_contrastive_loss, train_stage
from validate_a34 import NARROW

root = Path("/tmp/a34val")
train_clips = gen_toy_dataset(7, 4, 1.0)
held_entries = [(root / "held" / f"h{i:02d}.wav", c.domain)
                for i, c in enumerate(gen_toy_dataset(8, 4, 1.0))]
mask = MaskSpec(p=0.1, span=5)
ccfg = ContrastiveConfig(n_distractors=16, temperature=0.1)


def distinct_codewords(codec):
    rng = np.random.default_rng(9)
    counts = []
    for clip in train_clips:
        x = clip.samples[: (len(clip.samples) // 320) * 320].astype(np.float32)
        ms = sample_mask(len(x) // 320, mask, rng)
        frames, _ = codec.encode_frames(x, mask=ms.mask)
        stream, _ = codec.quantize(frames, domain=clip.domain)
        counts.append(len(set(stream.ids[ms.mask].tolist())))
    return float(np.mean(counts))


out = open("/root/pkg/validate_a4d_results.txt", "w", buffering=1)
out.write(f"distinct cw at raw init: {distinct_codewords(Codec(NARROW, seed=0)):.1f}\n")

for beta in (0.0, 0.05):
    t0 = time.time()
    a3cfg = StageConfig.acoustic(steps=500, batch_size=2, seed=0, lr=1e-3, lr_min=1e-4,
                                 beta_commit=beta, checkpoint_every=250, log_every=100)
    res = train_stage(train_clips, a3cfg, root / f"a3b{beta:g}", model_config=NARROW)
    ratio = res.final_recon / res.step0_recon
    codec3 = Codec.load(res.final_checkpoint)
    mel3 = {}
    for tag, pth in [("0", root / f"a3b{beta:g}" / "ckpt_step0.tckp"),
                     ("250", root / f"a3b{beta:g}" / "ckpt_step250.tckp"),
                     ("500", res.final_checkpoint)]:
        mel3[tag] = sum(run_eval(Codec.load(pth), held_entries).mel.values()) / 3
    viol = sum(1 for a, b in [("0", "250"), ("250", "500")] if mel3[b] >= mel3[a])
    out.write(f"acoustic beta={beta:g}: ratio {ratio:.4f} [<=0.5]; mel trend "
              f"{mel3['0']:.3f}/{mel3['250']:.3f}/{mel3['500']:.3f} viol={viol} [<=1]; "
              f"distinct cw {distinct_codewords(codec3):.1f} ({(time.time()-t0)/60:.1f} min)\n")
    if ratio > 0.5 or viol > 1:
        continue
    for lam_c, sem_beta in ((50.0, 0.0), (10.0, 0.25)):
        t1 = time.time()
        scfg = StageConfig.semantic(steps=200, batch_size=2, seed=0, lr=1e-3, lr_min=1e-4,
                                    lam_c=lam_c, beta_commit=sem_beta, log_every=50,
                                    mask=mask, contrastive=ccfg)
        res4 = train_stage(train_clips, scfg, root / f"a4e_b{beta:g}_l{lam_c:g}_sb{sem_beta:g}",
                           init_from=res.final_checkpoint)
        codec4 = Codec.load(res4.final_checkpoint)
        lm = dataset_contrastive_loss(codec4, train_clips, mask, ccfg, seed=123)
        mel4 = sum(run_eval(codec4, held_entries).mel.values()) / 3
        out.write(f"  semantic lam_c={lam_c:g} beta={sem_beta:g}: L_m {lm:.4f} [<2.333]; "
                  f"mel x{mel4/mel3['500']:.3f} [<1.20]; distinct cw "
                  f"{distinct_codewords(codec4):.1f} ({(time.time()-t1)/60:.1f} min)\n")
out.write("done\n")
out.close()
