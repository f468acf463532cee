"""Measure candidate separability for the contrastive task at a trained
checkpoint: conv-feature geometry per clip plus the ideal loss reachable by
a perfect predictor (q := own conv feature)."""

import numpy as np

from tricodec.losses import ContrastiveConfig, MaskSpec, contrastive_loss, sample_mask
from tricodec.autodiff import Tensor
from tricodec.model import Codec
from tricodec.signal import gen_toy_dataset

train_clips = gen_toy_dataset(7, 4, 1.0)
codec = Codec.load("/tmp/ve/m4.0_a1.0/a3/ckpt_final.tckp")

rng = np.random.default_rng(0)
ideal, actual = [], []
for clip in train_clips:
    n = (len(clip.samples) // 320) * 320
    x = clip.samples[:n].astype(codec.dtype)
    T = n // 320
    maskset = sample_mask(T, MaskSpec(p=0.1, span=5), rng)
    frames, conv = codec.encode_frames(x, mask=maskset.mask)
    _, q = codec.quantize(frames, domain=clip.domain)
    C = conv.data
    norms = np.linalg.norm(C, axis=1)
    mu = C.mean(0)
    cos_mu = C @ mu / (norms * np.linalg.norm(mu) + 1e-12)
    pair = (C @ C.T) / (norms[:, None] * norms[None, :] + 1e-12)
    off = pair[~np.eye(len(C), dtype=bool)]
    print(
        f"{clip.domain.value}: conv rows {C.shape} norm [{norms.min():.2f} {norms.mean():.2f} "
        f"{norms.max():.2f}] cos-to-mean mean {cos_mu.mean():.4f}  pairwise cos mean "
        f"{off.mean():.4f} p5 {np.percentile(off, 5):.4f} p95 {np.percentile(off, 95):.4f}"
    )
    cfg = ContrastiveConfig(n_distractors=16)
    li = contrastive_loss(Tensor(C.copy()), Tensor(C.copy()), maskset, cfg, np.random.default_rng(3))
    la = contrastive_loss(q, Tensor(C.copy()), maskset, cfg, np.random.default_rng(3))
    ideal.append(float(li.data))
    actual.append(float(la.data))

print(f"\nideal L_m (q := own conv feature): {np.mean(ideal):.4f}  [chance {np.log(17):.4f}]")
print(f"actual L_m (trained quantized):     {np.mean(actual):.4f}")
