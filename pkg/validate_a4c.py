import itertools
import time
from pathlib import Path

import numpy as np

from tricodec.cli import run_eval
from tricodec.losses import ContrastiveConfig, MaskSpec, contrastive_loss, sample_mask
from tricodec.model import Codec
from tricodec.signal import gen_toy_dataset
from tricodec.training import StageConfig, dataset_contrastive_loss, train_stage

root = Path("/tmp/a34val")
a3_ckpt = root / "a3" / "ckpt_final.tckp"
train_clips = gen_toy_dataset(7, 4, 1.0)
held_entries = [(root / "held" / f"h{i:02d}.wav", c.domain)
                for i, c in enumerate(gen_toy_dataset(8, 4, 1.0))]

mask = MaskSpec(p=0.1, span=5)
ccfg = ContrastiveConfig(n_distractors=16, temperature=0.1)
mel_a3 = sum(run_eval(Codec.load(a3_ckpt), held_entries).mel.values()) / 3


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


out = open("/root/pkg/validate_a4c_results.txt", "w", buffering=1)
out.write(f"mel at A3 ckpt: {mel_a3:.4f}; distinct cw at A3: {distinct_codewords(Codec.load(a3_ckpt)):.1f}\n")
for beta, lam_c in itertools.product((0.0, 0.05), (10.0, 50.0)):
    t0 = time.time()
    cfg = StageConfig.semantic(steps=200, batch_size=2, seed=0, lr=1e-3, lr_min=1e-4,
                               lam_c=lam_c, beta_commit=beta, log_every=50,
                               mask=mask, contrastive=ccfg)
    res = train_stage(train_clips, cfg, root / f"a4d_b{beta:g}_l{lam_c:g}", init_from=a3_ckpt)
    codec = Codec.load(res.final_checkpoint)
    lm = dataset_contrastive_loss(codec, train_clips, mask, ccfg, seed=123)
    mel = sum(run_eval(codec, held_entries).mel.values()) / 3
    out.write(f"beta={beta:g} lam_c={lam_c:g}: L_m -> {lm:.4f} [<2.333]; "
              f"mel x{mel/mel_a3:.3f} [<1.20]; distinct cw {distinct_codewords(codec):.1f} "
              f"({(time.time()-t0)/60:.1f} min)\n")
out.write("done\n")
out.close()
