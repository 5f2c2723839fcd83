import numpy as np
import pytest

from nvclab.codec import (LAMBDAS, Latent, ModelFormatError, decode_frame, encode_frame,
                          extract_context, init_model, load_model, predict_entropy_params,
                          pretrain, save_model, training_sequences, zero_context)
from nvclab.quantizer import hard_round
from nvclab.video_io import gen_synthetic


@pytest.fixture(scope="module")
def frames():
    return gen_synthetic(21, 64, 64, 3, "mixed")


def test_context_shape_and_determinism(raw_model, frames):
    a = extract_context(frames[0], raw_model)
    b = extract_context(frames[0], raw_model)
    assert a.shape == (48, 16, 16)
    assert a.tobytes() == b.tobytes()


def test_intra_context_is_zero(raw_model, frames):
    ctx = extract_context(frames[0], raw_model, intra=True)
    assert ctx.shape == (48, 16, 16) and not ctx.any()
    assert not zero_context(64, 64).any()


def test_latent_shape_and_determinism(raw_model, frames):
    ctx = extract_context(frames[0], raw_model)
    a = encode_frame(frames[1], ctx, raw_model)
    b = encode_frame(frames[1], ctx, raw_model)
    assert a.shape == (48, 16, 16)
    assert a.data.tobytes() == b.data.tobytes()


def test_rate_points_scale_the_latent(raw_model, frames):
    ctx = zero_context(64, 64)
    y = [encode_frame(frames[0], ctx, raw_model, k).data for k in range(len(LAMBDAS))]
    ratios = [float(np.max(np.abs(y[k]))) for k in range(4)]
    assert ratios == sorted(ratios)  # higher lambda, finer quantization, larger coded values


def test_entropy_params(raw_model):
    rng = np.random.default_rng(0)
    mu, sigma = predict_entropy_params(rng.standard_normal((48, 16, 16)).astype(np.float32) * 50,
                                       raw_model)
    assert mu.shape == sigma.shape == (48, 16, 16)
    assert sigma.min() >= np.float32(0.01)
    m1, s1 = predict_entropy_params(zero_context(64, 64), raw_model)
    m2, s2 = predict_entropy_params(zero_context(64, 64), raw_model)
    assert m1.tobytes() == m2.tobytes() and s1.tobytes() == s2.tobytes()


def test_decode_range_and_determinism(raw_model, frames):
    ctx = extract_context(frames[0], raw_model)
    y_hat = hard_round(encode_frame(frames[1], ctx, raw_model).data)
    a = decode_frame(y_hat, ctx, raw_model, 1)
    assert a.shape == (3, 64, 64) and np.all(np.isfinite(a))
    assert a.min() >= 0 and a.max() <= 1
    assert decode_frame(Latent(y_hat, 1, 1), ctx, raw_model).tobytes() == a.tobytes()


def test_decoder_takes_no_refinement_flag():
    import inspect

    params = inspect.signature(decode_frame).parameters
    assert list(params) == ["y_hat", "ctx", "model", "rate_index"]


def test_bad_frame_shape(raw_model):
    with pytest.raises(ValueError):
        encode_frame(np.zeros((3, 60, 64), np.float32), zero_context(64, 64), raw_model)


def test_unfrozen_model_refuses_to_encode(frames):
    with pytest.raises(RuntimeError, match="frozen"):
        encode_frame(frames[0], zero_context(64, 64), init_model(0))


def test_parameters_unchanged_by_coding(raw_model, frames):
    before = raw_model.checksum()
    ctx = extract_context(frames[0], raw_model)
    decode_frame(hard_round(encode_frame(frames[1], ctx, raw_model).data), ctx, raw_model, 1)
    assert raw_model.checksum() == before
    with pytest.raises(ValueError):
        raw_model.params["ga1_w"][0, 0, 0, 0] = 1.0


def test_zero_steps_is_a_frozen_no_op():
    init = init_model(5)
    out = pretrain(init, training_sequences(5, count=1, frames=2), 0)
    assert out.frozen
    assert out.checksum() == init.checksum()


def test_pretraining_is_deterministic():
    data = training_sequences(1, count=2, frames=3, size=32)
    a = pretrain(init_model(1), data, 15, seed=1)
    b = pretrain(init_model(1), data, 15, seed=1)
    assert a.checksum() == b.checksum()
    assert a.checksum() != init_model(1).checksum()


def test_pretraining_reduces_loss():
    history = []
    pretrain(init_model(0), training_sequences(0), 2000, seed=0, history=history)
    tail = float(np.mean(history[-100:]))
    assert tail < history[0]
    assert tail < 3.0  # measured 2.33 bpp + 1360 * MSE on the seeded run


def test_model_file_round_trip(raw_model, tmp_path):
    path = tmp_path / "m.nvcm"
    save_model(raw_model, path)
    back = load_model(path)
    assert back.checksum() == raw_model.checksum()
    assert back.rate_scales == raw_model.rate_scales and back.frozen


def test_model_file_corruption(raw_model, tmp_path):
    path = tmp_path / "m.nvcm"
    save_model(raw_model, path)
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 1
    path.write_bytes(bytes(blob))
    with pytest.raises(ModelFormatError, match="checksum"):
        load_model(path)
    path.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(path)
    path.write_bytes(bytes(blob[:10]))
    with pytest.raises(ModelFormatError, match="truncated"):
        load_model(path)


def test_zero_frame_latent_regression(pretrained):
    y = encode_frame(np.zeros((3, 64, 64), np.float32), zero_context(64, 64), pretrained, 1).data
    # recorded once from the seeded 4000-step model
    assert float(y.astype(np.float64).sum()) == pytest.approx(-48.973815, rel=1e-4)
    assert float(y[0, 0, 0]) == pytest.approx(-0.069390506, rel=1e-4)
    assert float(y[47, 15, 15]) == pytest.approx(-0.009811963, rel=1e-4)
