import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pixelrnn import container
from pixelrnn.cells import CellSpec, LayerShape, encode_clip, make_spec
from pixelrnn.train.fit import (
    TrainConfig,
    build_model,
    checkpoint_bytes,
    cross_entropy_at_init,
    evaluate,
    finetune_decoder,
    fit,
    load_checkpoint,
    shadow_params,
    unrolled_backward,
)
from pixelrnn.train.model import Classifier, Encoder, chance_loss, loss_fn
from pixelrnn.train.quant import (
    Quantizer,
    accumulator_sigma,
    inject_noise,
    surrogate_grad_sigmoid,
    surrogate_grad_sign,
)

TOY = CellSpec(kind="PIXELRNN", cnn_layers=1, plane=8, K=4, layer=LayerShape(4, pool=2, grid=(2, 2)))


def toy_clips(n, seed=0, frames=8):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, frames, 8, 8)).astype(np.uint8), np.arange(n) % 4


# -- surrogates

def test_surrogate_examples():
    assert surrogate_grad_sign(0.0, 1.0) == pytest.approx(1.0)
    assert surrogate_grad_sign(0.0, 4.0) == pytest.approx(4.0)
    assert surrogate_grad_sign(1.0, 2.0) == pytest.approx(0.1413, abs=1e-4)
    assert surrogate_grad_sigmoid(0.0, 1.0) == pytest.approx(0.25)
    assert surrogate_grad_sigmoid(0.0, 4.0) == pytest.approx(1.0)
    assert surrogate_grad_sigmoid(2.0, 1.0) == pytest.approx(0.10499, abs=1e-5)
    with pytest.raises(ValueError):
        surrogate_grad_sign(0.0, 0.0)


def test_surrogates_approach_step_as_m_grows():
    # the smooth proxies converge to the hard quantizers away from 0, and their
    # derivatives vanish there
    w = np.array([-2.0, -0.5, -0.1, 0.1, 0.5, 2.0])
    q_sign, q_step = Quantizer("smooth", "pm1", 1e4), Quantizer("smooth", "01", 1e4)
    x = torch.as_tensor(w)
    assert np.allclose(q_sign(x).numpy(), np.sign(w))
    assert np.allclose(q_step(x).numpy(), (w > 0).astype(float))
    assert np.all(surrogate_grad_sign(w, 1e4) < 1e-12)
    assert np.all(surrogate_grad_sigmoid(w, 1e4) < 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.1, 10))
def test_surrogate_matches_autograd(w, m):
    x = torch.tensor(w, dtype=torch.float64, requires_grad=True)
    torch.tanh(m * x).backward()
    assert float(x.grad) == pytest.approx(surrogate_grad_sign(w, m), rel=1e-9, abs=1e-12)
    x.grad = None
    torch.sigmoid(m * x).backward()
    assert float(x.grad) == pytest.approx(surrogate_grad_sigmoid(w, m), rel=1e-9, abs=1e-12)


def test_binary_quantizer_forward_and_backward():
    x = torch.tensor([-1.0, 0.0, 0.5], requires_grad=True)
    q = Quantizer("binary", "pm1", 2.0)
    y = q(x)
    assert y.tolist() == [-1.0, 1.0, 1.0]
    assert q(x, strict=True).tolist() == [-1.0, -1.0, 1.0]
    y.sum().backward()
    assert np.allclose(x.grad.numpy(), surrogate_grad_sign(x.detach().numpy(), 2.0))
    z = torch.tensor([-1.0, 0.0, 3.0], requires_grad=True)
    s = Quantizer("binary", "01", 2.0)(z, scale=2.0)
    assert s.tolist() == [0.0, 0.0, 1.0]
    s.sum().backward()
    assert np.allclose(z.grad.numpy(), surrogate_grad_sigmoid(z.detach().numpy(), 1.0))


# -- gradients

def test_smooth_gradient_matches_finite_differences():
    from oracles import toy_gradient_check

    err = toy_gradient_check(n_params=30, seed=1)
    assert err.max() < 1e-4


def test_unrolled_backward_reaches_every_parameter():
    x, y = toy_clips(4)
    model = build_model(TOY, TrainConfig(), 4, frames=8, side=8)
    with torch.no_grad():
        model.decoder.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(0))
    loss, grads = unrolled_backward(model, x, y)
    assert math.isfinite(loss)
    assert set(grads) == {n for n, _ in model.named_parameters()}
    for name in ("encoder.gates.w_f", "encoder.gates.u_f", "encoder.gates.w_o", "encoder.cnn_w.0"):
        assert grads[name].abs().sum() > 0, name


# -- loss, optimization

def test_zero_decoder_loss_is_log_m():
    x, y = toy_clips(8)
    for m_classes in (2, 4, 7):
        model = build_model(TOY, TrainConfig(), m_classes, frames=8, side=8)
        loss = loss_fn(model(torch.as_tensor(x)), torch.as_tensor(y % m_classes))
        assert float(loss.detach()) == pytest.approx(math.log(m_classes), rel=1e-6)
        assert cross_entropy_at_init(m_classes) == pytest.approx(math.log(m_classes))
        assert chance_loss(m_classes) == pytest.approx(math.log(m_classes))


def test_one_step_decreases_loss():
    x, y = toy_clips(8)
    model = build_model(TOY, TrainConfig(), 4, frames=8, side=8)
    frames, labels = torch.as_tensor(x), torch.as_tensor(y)
    opt = torch.optim.SGD(model.parameters(), lr=1e-2)
    before = loss_fn(model(frames), labels)
    before.backward()
    opt.step()
    with torch.no_grad():
        after = loss_fn(model(frames), labels)
    assert float(after) < float(before.detach())


def test_overfits_small_set():
    x, y = toy_clips(8, seed=3)
    cfg = TrainConfig(epochs=60, lr=3e-2, batch_size=8, target_acc=1.0)
    res = fit(TOY, (x, y), (x, y), cfg, 4)
    assert evaluate(res.model, x, y)["acc"] == 1.0


def test_fit_is_deterministic(tmp_path):
    x, y = toy_clips(12, seed=4)
    cfg = TrainConfig(epochs=3, batch_size=4, augment_shift=1, augment_time=1)
    a = fit(TOY, (x[:8], y[:8]), (x[8:], y[8:]), cfg, 4, metrics_path=tmp_path / "a.jsonl")
    b = fit(TOY, (x[:8], y[:8]), (x[8:], y[8:]), cfg, 4, metrics_path=tmp_path / "b.jsonl")
    assert a.checkpoint == b.checkpoint
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len(a.history) == 3 and "wall_clock" not in a.history[0]


def test_fit_warm_start():
    x, y = toy_clips(8, seed=5)
    cfg = TrainConfig(epochs=1, batch_size=8, lr=1e-3)
    base = fit(TOY, (x, y), (x, y), cfg, 4)
    # the first epoch starts from the base weights, so its loss stays near the base loss
    warm = fit(TOY, (x, y), (x, y), cfg, 4, init=base.model)
    assert abs(warm.history[0]["train_loss"] - base.history[-1]["val_loss"]) < 0.1
    retrained = fit(TOY, (x, y), (x, y), TrainConfig(epochs=1, batch_size=8, noise_sigma=2.9), 4, init=base.model)
    assert retrained.model.encoder.noise_sigma == 2.9
    assert base.model.encoder.noise_sigma == 0.0


def test_train_config_validation():
    for bad in (dict(lr=1.0), dict(lr_min=1e-1, lr_max=1e-2), dict(noise_sigma=-1), dict(m=0),
                dict(epochs=0), dict(split=(0.5, 0.5, 0.5)), dict(encoder_lr_scale=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(epochs=7, noise_sigma=2.9)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- noise

def test_inject_noise():
    plane = np.arange(12).reshape(3, 4)
    assert np.array_equal(inject_noise(plane, 0.0), plane)
    with pytest.raises(ValueError):
        inject_noise(plane, -1.0)
    z = inject_noise(np.zeros(1_000_000), 2.9, seed=0)
    assert abs(z.mean()) < 0.01 * 2.9
    assert abs(z.std() / 2.9 - 1) < 0.01
    assert np.array_equal(inject_noise(plane, 1.0, seed=5), inject_noise(plane, 1.0, seed=5))


def test_accumulator_sigma():
    assert accumulator_sigma(2.9, 25, 10.0) == pytest.approx(2.9 * 5 / 10)
    assert accumulator_sigma(2.9, 51, 10.0) == pytest.approx(2.9 * math.sqrt(51) / 10)


def test_training_noise_only_in_train_mode():
    x, _ = toy_clips(2)
    enc = Encoder(TOY, noise_sigma=5.0, seed=0)
    enc.eval()
    a, b = enc(torch.as_tensor(x)), enc(torch.as_tensor(x))
    assert torch.equal(a, b)
    enc.train()
    assert not torch.equal(enc(torch.as_tensor(x)), enc(torch.as_tensor(x)))


# -- agreement with the reference and checkpoints

@pytest.mark.parametrize("kind", ["PIXELRNN", "CNN", "SRNN", "GRU", "MGU", "LSTM", "GENRNN"])
def test_binary_forward_equals_reference(kind):
    spec = make_spec(kind, 1)
    enc = Encoder(spec, mode="binary", seed=2, init_scale=0.5, tau_init=0.5)
    enc.eval()
    rng = np.random.default_rng(2)
    frames = rng.integers(0, 256, size=(16, 64, 64)).astype(np.uint8)
    with torch.no_grad():
        got = enc(torch.as_tensor(frames[None]))[0].numpy()
    want = encode_clip(spec, enc.export_params(), frames)
    assert got.shape == want.shape
    assert np.array_equal(got, want)


def test_quantized_view_is_pure_function_of_shadows():
    enc = Encoder(TOY, seed=0)
    k1 = enc.gate_kernel("w_f").clone()
    assert torch.equal(enc.gate_kernel("w_f"), k1)
    with torch.no_grad():
        enc.gates["w_f"].mul_(3.0)  # positive rescale keeps every sign
    assert torch.equal(enc.gate_kernel("w_f"), k1)
    with torch.no_grad():
        enc.gates["w_f"].neg_()
    w = enc.gates["w_f"].detach()
    assert torch.equal(enc.gate_kernel("w_f"), torch.where(w >= 0, 1.0, -1.0))
    for p in shadow_params(enc):
        if p.regime == "pm1":
            assert set(np.unique(p.value)) <= {-1, 1}


def test_checkpoint_roundtrip():
    x, _ = toy_clips(3)
    model = build_model(TOY, TrainConfig(), 4, frames=8, side=8)
    with torch.no_grad():
        model.decoder.weight.normal_(0, 0.3, generator=torch.Generator().manual_seed(0))
    blob = checkpoint_bytes(model, {"epoch": 5})
    back, header = load_checkpoint(blob)
    assert header["meta"]["epoch"] == 5
    assert checkpoint_bytes(back, {"epoch": 5}) == blob
    model.eval()
    back.eval()
    with torch.no_grad():
        assert torch.equal(model(torch.as_tensor(x)), back(torch.as_tensor(x)))


def test_checkpoint_rejects_bits_that_disagree_with_shadows():
    model = build_model(TOY, TrainConfig(), 4, frames=8, side=8)
    header, recs = container.from_bytes(checkpoint_bytes(model))
    name = "encoder.gates.w_f"
    recs[name] = container.Record(name, -recs[name].value, recs[name].shadow)
    with pytest.raises(container.ContainerError):
        load_checkpoint(container.to_bytes(header, list(recs.values())))


def test_finetune_decoder_checks_dimensions_and_keeps_encoder():
    x, y = toy_clips(8)
    model = build_model(TOY, TrainConfig(), 4, frames=8, side=8)
    model.eval()
    with torch.no_grad():
        feats = model.encoder(torch.as_tensor(x)).numpy()
    enc_before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
    tuned = finetune_decoder(model, feats, y, epochs=50)
    assert all(torch.equal(v, tuned.encoder.state_dict()[k]) for k, v in enc_before.items())
    assert torch.count_nonzero(model.decoder.weight) == 0  # the original decoder is untouched
    with pytest.raises(ValueError):
        finetune_decoder(model, feats[:, :, :4], y)
    with pytest.raises(ValueError):
        finetune_decoder(model, feats, y[:3])


def test_classifier_feature_count():
    model = Classifier(Encoder(make_spec("PIXELRNN", 1, K=8)), 4, frames=16)
    assert model.n_emissions == 2 and model.n_features == 2 * 64 * 64
    cnn = Classifier(Encoder(make_spec("CNN", 1)), 4, frames=16)
    assert cnn.n_features == 64 * 64
