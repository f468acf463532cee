import shutil
import time
from pathlib import Path

from tricodec.cli import run_eval
from tricodec.decoder import DecoderConfig
from tricodec.encoder import EncoderConfig, MoEConfig
from tricodec.losses import ContrastiveConfig, MaskSpec
from tricodec.model import Codec, CodecConfig
from tricodec.quantizer import QuantizerConfig
from tricodec.signal import gen_toy_dataset, save_wav
from tricodec.training import StageConfig, dataset_contrastive_loss, train_stage

NARROW = CodecConfig(
    encoder=EncoderConfig(
        strides=(2, 4, 5, 4, 2), conv_channels=(8, 16, 32, 32, 64), hidden=64, layers=2,
        heads=4, mlp_dim=256, moe=MoEConfig(1, 3, 1, 128),
    ),
    quantizer=QuantizerConfig(codebook_size=512, hidden=64, speech_end=128, music_end=256),
    decoder=DecoderConfig(strides=(2, 4, 5, 4, 2), channels=(32, 32, 16, 8, 8), hidden=64, out_kernel=7),
)

out = open("/root/pkg/validate_a34_results.txt", "w", buffering=1)
root = Path("/tmp/a34val")
shutil.rmtree(root, ignore_errors=True)
root.mkdir(parents=True)

train_clips = gen_toy_dataset(7, 4, 1.0)
held = gen_toy_dataset(8, 4, 1.0)
held_dir = root / "held"
held_dir.mkdir()
entries = []
for i, clip in enumerate(held):
    p = held_dir / f"h{i:02d}.wav"
    save_wav(p, clip)
    entries.append((p, clip.domain))

t0 = time.time()
a3cfg = StageConfig.acoustic(steps=500, batch_size=2, seed=0, lr=1e-3, lr_min=1e-4,
                             checkpoint_every=250, log_every=100)
res = train_stage(train_clips, a3cfg, root / "a3", model_config=NARROW)
ratio = res.final_recon / res.step0_recon
out.write(f"A3 train: {res.step0_recon:.1f} -> {res.final_recon:.1f} ratio {ratio:.4f} "
          f"({(time.time()-t0)/60:.1f} min)  [need <= 0.5]\n")

mels = {}
for tag, path in [("0", root / "a3" / "ckpt_step0.tckp"),
                  ("250", root / "a3" / "ckpt_step250.tckp"),
                  ("500", res.final_checkpoint)]:
    rep = run_eval(Codec.load(path), entries)
    mels[tag] = sum(rep.mel.values()) / len(rep.mel)
    out.write(f"A3 eval mel @ step {tag}: {mels[tag]:.4f}  per-domain {rep.mel}\n")
viol = sum(1 for a, b in [("0", "250"), ("250", "500")] if mels[b] >= mels[a])
out.write(f"A3 monotone violations: {viol}  [need <= 1]\n")

mask = MaskSpec(p=0.1, span=5)
ccfg = ContrastiveConfig(n_distractors=16, temperature=0.1)
codec_a3 = Codec.load(res.final_checkpoint)
lm0 = dataset_contrastive_loss(codec_a3, train_clips, mask, ccfg, seed=123)
out.write(f"A4 contrastive at A3 ckpt: {lm0:.4f}  [uniform = {2.833:.3f}, need < 2.333]\n")

for lr, lrm in [(5e-4, 1e-4), (1e-3, 1e-4)]:
    t1 = time.time()
    a4cfg = StageConfig.semantic(steps=200, batch_size=2, seed=0, lr=lr, lr_min=lrm,
                                 log_every=50, mask=mask, contrastive=ccfg)
    res4 = train_stage(train_clips, a4cfg, root / f"a4_{lr:g}", init_from=res.final_checkpoint)
    codec_a4 = Codec.load(res4.final_checkpoint)
    lm = dataset_contrastive_loss(codec_a4, train_clips, mask, ccfg, seed=123)
    rep4 = run_eval(codec_a4, entries)
    mel4 = sum(rep4.mel.values()) / len(rep4.mel)
    out.write(f"A4 lr={lr:g}/{lrm:g}: L_m {lm0:.3f} -> {lm:.4f} [need < 2.333]; "
              f"mel {mels['500']:.4f} -> {mel4:.4f} (x{mel4/mels['500']:.3f}, need < 1.20) "
              f"({(time.time()-t1)/60:.1f} min)\n")
out.write("done\n")
out.close()
