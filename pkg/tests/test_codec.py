import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from sdcodec.codec import PRESETS, CodecConfig, Decoder, Encoder, pad_to_hop, preset
from sdcodec.errors import ConfigError, NumericError
from sdcodec.losses import multiscale_mel_loss
from sdcodec.model import SDCodec, resynthesize


def test_presets():
    toy, paper = preset("toy"), preset("paper")
    assert (toy.latent_dim, toy.code_dim, toy.n_layers, toy.codebook_bits, toy.hop_length) == (64, 4, 4, 6, 64)
    assert (paper.latent_dim, paper.code_dim, paper.n_layers, paper.codebook_bits) == (1024, 8, 12, 10)
    assert paper.hop_length == 320 and paper.frame_rate == 50
    assert paper.bits_per_frame == 120 and paper.codebook_size == 1024
    assert toy.hop_length * toy.frame_rate == toy.sample_rate


@pytest.mark.parametrize("field,value", [
    ("shared_tail", 5), ("shared_tail", -1), ("strides", (3, 7)), ("latent_dim", 0),
    ("sources", ("music", "speech")), ("sources", ("speech", "mix")), ("codebook_bits", 17),
])
def test_config_errors_name_field(field, value):
    with pytest.raises(ConfigError, match=f"codec.{field}"):
        CodecConfig(**{field: value}).validate()


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("huge")


def test_toy_shapes_and_size():
    model = SDCodec(preset("toy")).eval()
    assert model.parameter_count() < 2_000_000
    with torch.no_grad():
        z = model.encode(torch.randn(2, 1, 6400))
        assert z.shape == (2, 64, 100)
        assert model.decode(z).shape == (2, 1, 6400)


def test_paper_encoder_frame_rate():
    cfg = preset("paper")
    torch.manual_seed(0)
    with torch.no_grad():
        z = Encoder(cfg)(torch.randn(1, 1, 16000))
        assert z.shape == (1, 1024, 50)
        y = Decoder(cfg)(z[..., :5])
    assert y.shape == (1, 1, 1600)


@given(st.integers(1, 3000))
def test_length_contract(n):
    model = SDCodec(preset("toy")).eval()
    with torch.no_grad():
        x = torch.randn(1, 1, n) * 0.1
        recon, q = model(x, {"speech"})
    assert recon["mix"].shape[-1] == n
    assert q.zq_mix.shape[-1] == -(-n // 64)
    assert torch.isfinite(recon["mix"]).all()
    assert recon["mix"].abs().max() <= 1.0


def test_pad_to_hop_records_padding():
    x, pad = pad_to_hop(torch.ones(1, 1, 100), 64)
    assert x.shape[-1] == 128 and pad == 28
    assert x[..., 100:].abs().sum() == 0


def test_non_finite_rejected():
    model = SDCodec(preset("toy")).eval()
    with pytest.raises(NumericError):
        model.encode(torch.full((1, 1, 640), float("nan")))
    with pytest.raises(NumericError):
        model.decode(torch.full((1, 64, 10), float("inf")))


def test_zero_input_gradient_finite():
    model = SDCodec(preset("toy"))
    x = torch.zeros(1, 1, 2048, requires_grad=True)
    model.decode(model.encode(x)).pow(2).sum().backward()
    assert torch.isfinite(x.grad).all()


def test_decoder_is_nonlinear():
    torch.manual_seed(0)
    dec = Decoder(preset("toy"))
    dec.bound_output = False
    z = torch.randn(1, 64, 20)
    with torch.no_grad():
        assert (dec(2 * z) - 2 * dec(z)).abs().max() > 1e-6


def test_encode_deterministic_in_eval():
    model = SDCodec(preset("toy")).eval()
    x = torch.randn(1, 1, 1280)
    with torch.no_grad():
        assert torch.equal(model.encode(x), model.encode(x))


def test_end_to_end_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = SDCodec(preset("toy")).double()
    x = (0.3 * torch.randn(1, 1, 2048, dtype=torch.float64)).requires_grad_(True)
    target = 0.3 * torch.randn(1, 1, 2048, dtype=torch.float64)

    def loss(inp):
        return multiscale_mel_loss(model.decode(model.encode(inp)), target)

    loss(x).backward()
    probe = torch.arange(500, 510)
    fd, h = [], 1e-6
    with torch.no_grad():
        for i in probe:
            xp, xm = x.detach().clone(), x.detach().clone()
            xp[0, 0, i] += h
            xm[0, 0, i] -= h
            fd.append((loss(xp) - loss(xm)).item() / (2 * h))
    fd = torch.tensor(fd, dtype=torch.float64)
    got = x.grad[0, 0, probe]
    assert torch.linalg.norm(got - fd) <= 1e-2 * torch.linalg.norm(fd)


def test_resynthesize_helper():
    model = SDCodec(preset("toy"))
    out = resynthesize(model, np.zeros(1000, np.float32), ["music"])
    assert set(out) == {"music", "mix"} and out["mix"].shape == (1000,)


def test_presets_listed():
    assert set(PRESETS) == {"toy", "paper"}
