import itertools
import tempfile
import time

from tricodec.decoder import DecoderConfig
from tricodec.encoder import EncoderConfig, MoEConfig
from tricodec.model import CodecConfig
from tricodec.quantizer import QuantizerConfig
from tricodec.signal import gen_toy_dataset
from tricodec.training import StageConfig, train_stage


def make_cfg(enc_ch, dec_ch, ok):
    return CodecConfig(
        encoder=EncoderConfig(
            strides=(2, 4, 5, 4, 2), conv_channels=enc_ch, hidden=64, layers=2,
            heads=4, mlp_dim=256, moe=MoEConfig(1, 3, 1, 128),
        ),
        quantizer=QuantizerConfig(codebook_size=512, hidden=64, speech_end=128, music_end=256),
        decoder=DecoderConfig(strides=(2, 4, 5, 4, 2), channels=dec_ch, hidden=64, out_kernel=ok),
    )


PRESETS = {
    "narrow": make_cfg((8, 16, 32, 32, 64), (32, 32, 16, 8, 8), 7),
    "mid": make_cfg((8, 16, 32, 32, 64), (48, 48, 32, 24, 16), 15),
    "wide": make_cfg((16, 24, 32, 48, 64), (48, 48, 32, 24, 16), 15),
}

clips = gen_toy_dataset(7, 4, 1.0)
with open("/root/pkg/sweep_a3_results.txt", "w", buffering=1) as out:
    for name, seed in itertools.product(PRESETS, (0, 1, 2)):
        cfg = StageConfig.acoustic(steps=500, batch_size=2, seed=seed, lr=1e-3, lr_min=1e-4, log_every=250)
        t0 = time.time()
        with tempfile.TemporaryDirectory() as d:
            res = train_stage(clips, cfg, d, model_config=PRESETS[name])
            out.write(
                f"{name} seed={seed}: {res.step0_recon:.1f} -> {res.final_recon:.1f} "
                f"ratio {res.final_recon / res.step0_recon:.3f} ({(time.time() - t0) / 60:.1f} min)\n"
            )
