import time
from pathlib import Path

from tricodec.cli import run_eval
from tricodec.losses import ContrastiveConfig, MaskSpec
from tricodec.model import Codec
from tricodec.signal import gen_toy_dataset
from tricodec.training import StageConfig, dataset_contrastive_loss, train_stage

root = Path("/tmp/a34val")
a3_ckpt = root / "a3" / "ckpt_final.tckp"
train_clips = gen_toy_dataset(7, 4, 1.0)
held_entries = [(p, d) for p, d in
                [(root / "held" / f"h{i:02d}.wav", c.domain)
                 for i, c in enumerate(gen_toy_dataset(8, 4, 1.0))]]

mask = MaskSpec(p=0.1, span=5)
ccfg = ContrastiveConfig(n_distractors=16, temperature=0.1)
mel_a3 = sum(run_eval(Codec.load(a3_ckpt), held_entries).mel.values()) / 3

out = open("/root/pkg/validate_a4b_results.txt", "w", buffering=1)
out.write(f"mel at A3 ckpt: {mel_a3:.4f}\n")
for lam_c in (10.0, 50.0, 200.0):
    t0 = time.time()
    cfg = StageConfig.semantic(steps=200, batch_size=2, seed=0, lr=1e-3, lr_min=1e-4,
                               lam_c=lam_c, log_every=50, mask=mask, contrastive=ccfg)
    res = train_stage(train_clips, cfg, root / f"a4c_{lam_c:g}", init_from=a3_ckpt)
    codec = Codec.load(res.final_checkpoint)
    lm = dataset_contrastive_loss(codec, train_clips, mask, ccfg, seed=123)
    mel = sum(run_eval(codec, held_entries).mel.values()) / 3
    out.write(f"lam_c={lam_c:g}: L_m -> {lm:.4f} [need < 2.333]; "
              f"mel {mel_a3:.4f} -> {mel:.4f} (x{mel/mel_a3:.3f}, need < 1.20) "
              f"({(time.time()-t0)/60:.1f} min)\n")
out.write("done\n")
out.close()
