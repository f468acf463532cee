"""Partitioned-codebook nearest-neighbor quantization and token streams."""

import numpy as np
import pytest

from tricodec.autodiff import Tensor, backward, mul, tsum
from tricodec.quantizer import (
    QuantizerConfig,
    TokenStream,
    TokenStreamError,
    alignment_loss,
    commitment_loss,
    effective_codewords,
    init_quantizer_params,
    load_tokens,
    quantize,
    region_of_id,
    save_tokens,
    simvq_embed,
    utilization,
)
from tricodec.signal import Domain

CFG = QuantizerConfig(codebook_size=64, hidden=8, speech_end=16, music_end=32)


def make_params(seed=0, cfg=CFG, dtype=np.float64):
    raw = init_quantizer_params(cfg, np.random.default_rng(seed), dtype=dtype)
    return {
        "vq.base": Tensor(raw["vq.base"], name="vq.base"),
        "vq.proj": Tensor(raw["vq.proj"], requires_grad=True, name="vq.proj"),
    }


def nn_oracle(frames, book, lo=0):
    """Exhaustive scan, direct squared distances, first minimum wins."""
    ids = []
    for f in frames:
        d = np.sum((book - f) ** 2, axis=1)
        ids.append(lo + int(np.argmin(d)))
    return np.array(ids)


# ---------------------------------------------------------------------------
# nearest-neighbor correctness


def test_quantize_matches_oracle_whole_book():
    rng = np.random.default_rng(1)
    params = make_params()
    book = effective_codewords(params).data
    for _ in range(20):
        frames = Tensor(rng.standard_normal((10, 8)))
        stream, _ = quantize(frames, params, CFG)
        assert np.array_equal(stream.ids, nn_oracle(frames.data, book))


def test_quantize_domain_restricted_matches_regional_oracle():
    rng = np.random.default_rng(2)
    params = make_params()
    book = effective_codewords(params).data
    for domain in Domain:
        lo, hi = CFG.region(domain)
        frames = Tensor(rng.standard_normal((12, 8)))
        stream, _ = quantize(frames, params, CFG, domain=domain)
        assert np.array_equal(stream.ids, nn_oracle(frames.data, book[lo:hi], lo))
        assert np.all(stream.ids >= lo) and np.all(stream.ids < hi)


def test_quantize_duplicate_rows_tie_breaks_to_lowest_id():
    params = make_params()
    base = params["vq.base"].data.copy()
    base[40] = base[7]  # exact duplicate across regions
    base[23] = base[7]
    params["vq.base"] = Tensor(base)
    f = Tensor(base[7][None, :] + 1e-9)
    stream, _ = quantize(f, params, CFG)
    assert stream.ids[0] == 7  # ids 7, 23, 40 all tie; lowest wins


def test_quantize_identity_projection_keeps_base_geometry():
    params = make_params()
    assert np.array_equal(effective_codewords(params).data, params["vq.base"].data)
    # quantizing an exact codeword returns its own id
    for idx in (0, 17, 63):
        f = Tensor(params["vq.base"].data[idx][None, :])
        stream, quantized = quantize(f, params, CFG)
        assert stream.ids[0] == idx
        assert np.allclose(quantized.data[0], params["vq.base"].data[idx])


def test_quantized_value_is_selected_codeword():
    rng = np.random.default_rng(3)
    params = make_params()
    frames = Tensor(rng.standard_normal((5, 8)))
    stream, quantized = quantize(frames, params, CFG)
    eff = effective_codewords(params).data
    assert np.array_equal(quantized.data, eff[stream.ids])


def test_quantize_straight_through_gradient():
    rng = np.random.default_rng(4)
    params = make_params()
    frames = Tensor(rng.standard_normal((6, 8)), requires_grad=True)
    _, quantized = quantize(frames, params, CFG)
    g = rng.standard_normal((6, 8))
    backward(tsum(mul(quantized, Tensor(g))))
    # identity passthrough: frames receive the downstream gradient unchanged
    assert np.allclose(frames.grad, g, atol=1e-12)
    # and the projection learns through the selected codewords
    assert params["vq.proj"].grad is not None
    assert np.any(params["vq.proj"].grad != 0)


def test_frozen_base_receives_no_gradient():
    rng = np.random.default_rng(5)
    params = make_params()
    frames = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    _, quantized = quantize(frames, params, CFG)
    backward(tsum(mul(quantized, quantized)))
    assert params["vq.base"].grad is None


# ---------------------------------------------------------------------------
# regions and embeddings


def test_region_bounds():
    assert QuantizerConfig().region(Domain.SPEECH) == (0, 4096)
    assert QuantizerConfig().region(Domain.MUSIC) == (4096, 8192)
    assert QuantizerConfig().region(Domain.SOUND) == (8192, 16384)


def test_region_of_id():
    assert region_of_id(CFG, 0) is Domain.SPEECH
    assert region_of_id(CFG, 15) is Domain.SPEECH
    assert region_of_id(CFG, 16) is Domain.MUSIC
    assert region_of_id(CFG, 32) is Domain.SOUND
    assert region_of_id(CFG, 63) is Domain.SOUND
    with pytest.raises(IndexError):
        region_of_id(CFG, 64)
    with pytest.raises(IndexError):
        region_of_id(CFG, -1)


def test_config_region_validation():
    with pytest.raises(ValueError):
        QuantizerConfig(codebook_size=64, hidden=8, speech_end=32, music_end=32)
    with pytest.raises(ValueError):
        QuantizerConfig(codebook_size=64, hidden=8, speech_end=0, music_end=32)
    with pytest.raises(ValueError):
        QuantizerConfig(codebook_size=64, hidden=8, speech_end=16, music_end=64)


def test_config_base_distribution_validation():
    with pytest.raises(ValueError, match="base_std"):
        QuantizerConfig(codebook_size=64, hidden=8, speech_end=16, music_end=32, base_std=0.0)
    with pytest.raises(ValueError, match="base_mean"):
        QuantizerConfig(codebook_size=64, hidden=8, speech_end=16, music_end=32, base_mean=-1.0)
    # zero mean is a valid centered configuration
    QuantizerConfig(codebook_size=64, hidden=8, speech_end=16, music_end=32, base_mean=0.0)


def test_init_base_statistics_follow_config():
    cfg = QuantizerConfig(codebook_size=4096, hidden=32, speech_end=1024, music_end=2048,
                          base_std=0.5, base_mean=6.0)
    params = init_quantizer_params(cfg, np.random.default_rng(11))
    base = params["vq.base"]
    mean_vec = base.mean(axis=0)
    assert abs(np.linalg.norm(mean_vec) - cfg.base_mean) < 0.1
    assert abs((base - mean_vec).std() - cfg.base_std) < 0.02
    assert np.allclose(params["vq.proj"].data, np.eye(32))


def test_simvq_embed_is_projected_base():
    rng = np.random.default_rng(6)
    params = make_params()
    proj = rng.standard_normal((8, 8))
    params["vq.proj"] = Tensor(proj, requires_grad=True)
    ids = np.array([3, 40, 3])
    out = simvq_embed(ids, params).data
    want = params["vq.base"].data[ids] @ proj.T
    assert np.allclose(out, want, atol=1e-12)


def test_simvq_embed_range_check():
    params = make_params()
    with pytest.raises(IndexError):
        simvq_embed(np.array([64]), params)
    with pytest.raises(IndexError):
        simvq_embed(np.array([-1]), params)


# ---------------------------------------------------------------------------
# commitment and utilization


def test_commitment_loss_zero_on_codewords():
    params = make_params()
    f = Tensor(params["vq.base"].data[[2, 9]])
    _, quantized = quantize(f, params, CFG)
    assert float(commitment_loss(f, quantized).data) == 0.0


def test_commitment_loss_value_and_beta():
    frames = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]), requires_grad=True)
    quantized = Tensor(np.zeros((2, 2)))
    # mean over frames of squared distance: (1 + 4) / 2 = 2.5
    assert abs(float(commitment_loss(frames, quantized, beta=0.25).data) - 0.625) < 1e-12
    assert abs(float(commitment_loss(frames, quantized, beta=1.0).data) - 2.5) < 1e-12


def test_commitment_loss_grad_targets_frames_only():
    rng = np.random.default_rng(7)
    frames = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    quantized = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    backward(commitment_loss(frames, quantized))
    assert frames.grad is not None
    assert quantized.grad is None  # stop-gradient side


def test_alignment_loss_value_mirrors_commitment():
    frames = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    codewords = Tensor(np.zeros((2, 2)))
    assert abs(float(alignment_loss(frames, codewords).data) - 2.5) < 1e-12


def test_alignment_loss_grad_targets_codebook_only():
    params = make_params()
    rng = np.random.default_rng(11)
    frames = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
    stream, _ = quantize(frames, params, CFG)
    backward(alignment_loss(frames, simvq_embed(stream.ids, params)))
    assert params["vq.proj"].grad is not None
    assert frames.grad is None  # stop-gradient side
    assert params["vq.base"].grad is None  # base embeddings stay frozen


def test_utilization_counts_distinct_per_region():
    s1 = TokenStream(np.array([0, 1, 1, 20]), codebook_size=64)
    s2 = TokenStream(np.array([20, 40, 63]), codebook_size=64)
    assert utilization([s1, s2], CFG) == 5 / 64
    assert utilization([s1, s2], CFG, domain=Domain.SPEECH) == 2 / 16
    assert utilization([s1, s2], CFG, domain=Domain.MUSIC) == 1 / 16
    assert utilization([s1, s2], CFG, domain=Domain.SOUND) == 2 / 32
    with pytest.raises(ValueError):
        utilization([], CFG)


# ---------------------------------------------------------------------------
# token stream format


def test_token_stream_validation():
    with pytest.raises(ValueError):
        TokenStream(np.array([[1, 2]]))
    with pytest.raises(ValueError):
        TokenStream(np.array([5, 16384]))
    with pytest.raises(ValueError):
        TokenStream(np.array([-1]))


def test_token_round_trip(tmp_path):
    stream = TokenStream(np.array([0, 5, 16383]), frame_rate=75,
                         source_sample_rate=24000, codebook_size=16384)
    p = tmp_path / "t.uctk"
    save_tokens(p, stream)
    back = load_tokens(p)
    assert np.array_equal(back.ids, stream.ids)
    assert back.frame_rate == 75
    assert back.source_sample_rate == 24000
    assert back.codebook_size == 16384
    assert back.ids.dtype == np.int64


def test_token_file_layout(tmp_path):
    p = tmp_path / "t.uctk"
    save_tokens(p, TokenStream(np.array([1, 2, 3]), codebook_size=512))
    raw = p.read_bytes()
    assert raw[:4] == b"UCTK"
    assert len(raw) == 28 + 6


def test_token_bad_magic_and_version(tmp_path):
    p = tmp_path / "t.uctk"
    save_tokens(p, TokenStream(np.array([1]), codebook_size=512))
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(TokenStreamError):
        load_tokens(p)
    raw = bytearray(p.read_bytes())
    # restore magic, break version
    raw[:4] = b"UCTK"
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(TokenStreamError):
        load_tokens(p)


def test_token_truncation_and_trailing(tmp_path):
    p = tmp_path / "t.uctk"
    save_tokens(p, TokenStream(np.array([1, 2, 3, 4]), codebook_size=512))
    raw = p.read_bytes()
    p.write_bytes(raw[:-2])
    with pytest.raises(TokenStreamError):
        load_tokens(p)
    p.write_bytes(raw + b"xx")
    with pytest.raises(TokenStreamError):
        load_tokens(p)


def test_token_save_rejects_oversized_codebook(tmp_path):
    stream = TokenStream(np.array([1]), codebook_size=100000)
    with pytest.raises(TokenStreamError):
        save_tokens(tmp_path / "big.uctk", stream)
