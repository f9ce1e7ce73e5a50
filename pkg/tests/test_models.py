import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from olat.errors import InvalidArgument, NumericError
from olat.losses import chamfer_loss, input_grad_norm
from olat.models import (
    CodeDiscriminator,
    CompleteEncoder,
    EncoderConfig,
    PartialEncoder,
    PointDecoder,
    PointDiscriminator,
    decode_complete,
    decode_partial,
    discriminate_code,
    discriminate_point,
    encode_complete,
    encode_partial,
    fuse,
    fused_width,
    init_uniform_,
    load_parameter_set,
    parameter_set,
)

from oracles import fd_relative_error


@pytest.fixture(scope="module", params=["pointwise_mlp", "edge_graph"])
def encoder(request):
    return init_uniform_(PartialEncoder(EncoderConfig(variant=request.param, widths=(32, 48, 64))), 3)


def test_encoder_shapes_and_bounds(encoder, rng):
    z, o = encode_partial(encoder, torch.as_tensor(rng.normal(size=(2, 100, 3)), dtype=torch.float32))
    assert z.shape == o.shape == (2, 96)
    assert bool(((o > 0) & (o < 1)).all())


def test_occlusion_code_never_saturates():
    enc = init_uniform_(PartialEncoder(EncoderConfig()), 0)
    with torch.no_grad():
        enc.o_head.bias.fill_(1e4)
        hi = enc(torch.zeros(1, 10, 3)).o
        enc.o_head.bias.fill_(-1e4)
        lo = enc(torch.zeros(1, 10, 3)).o
    assert bool((hi < 1).all()) and bool((lo > 0).all())


def test_encoder_deterministic_and_permutation_invariant(encoder, rng):
    P = torch.as_tensor(rng.normal(size=(1, 80, 3)), dtype=torch.float32)
    a = encode_partial(encoder, P)
    b = encode_partial(encoder, P)
    assert torch.equal(a.z, b.z) and torch.equal(a.o, b.o)
    for _ in range(5):
        c = encode_partial(encoder, P[:, torch.from_numpy(rng.permutation(80))])
        assert torch.equal(a.z, c.z) and torch.equal(a.o, c.o)


def test_encoder_rejects_nonfinite():
    enc = PartialEncoder(EncoderConfig())
    P = torch.zeros(1, 10, 3)
    P[0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        encode_partial(enc, P)


def test_role_checks():
    enc = PartialEncoder(EncoderConfig())
    dec = PointDecoder(96, 16, role="partial_decoder")
    with pytest.raises(InvalidArgument):
        encode_partial(dec, torch.zeros(1, 4, 3))
    with pytest.raises(InvalidArgument):
        decode_complete(dec, torch.zeros(96))
    with pytest.raises(InvalidArgument):
        discriminate_code(enc, torch.zeros(96))
    with pytest.raises(InvalidArgument):
        decode_partial(dec, torch.zeros(2 * 96))
    with pytest.raises(InvalidArgument):
        PointDecoder(96, 16, role="point_discriminator")
    with pytest.raises(InvalidArgument):
        EncoderConfig(variant="transformer")


def test_fuse_examples():
    z, o = torch.tensor([1.0, 2.0]), torch.tensor([0.5, 0.5])
    assert fuse(z, o).tolist() == [0.5, 1.0]
    assert fuse(z, o, "add").tolist() == [1.5, 2.5]
    assert fuse(z, o, "concat").tolist() == [1.0, 2.0, 0.5, 0.5]
    assert torch.equal(fuse(z, torch.ones(2)), z)
    assert torch.equal(fuse(torch.zeros(2), o), torch.zeros(2))
    assert [fused_width(96, m) for m in ("multiply", "add", "concat")] == [96, 96, 192]
    with pytest.raises(InvalidArgument):
        fuse(z, torch.ones(3))
    with pytest.raises(InvalidArgument):
        fuse(z, o, "max")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_subnormal=False), min_size=1, max_size=20))
def test_fuse_unit_occlusion_identity(values):
    z = torch.tensor(values, dtype=torch.float64)
    assert torch.equal(fuse(z, torch.ones_like(z)), z)


def test_decode_partial_unit_occlusion_matches_z():
    dec = init_uniform_(PointDecoder(96, 32, role="partial_decoder"), 1)
    z = torch.randn(3, 96, generator=torch.Generator().manual_seed(0))
    assert torch.equal(decode_partial(dec, fuse(z, torch.ones_like(z))), decode_partial(dec, z))


@pytest.mark.parametrize("role,n_out", [("complete_decoder", 2048), ("partial_decoder", 512)])
def test_decoder_shape_determinism_gradient(role, n_out):
    dec = init_uniform_(PointDecoder(96, n_out, role=role), 5).double()
    fn = decode_complete if role == "complete_decoder" else decode_partial
    z = torch.randn(96, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    out = fn(dec, z)
    assert out.shape == (1, n_out, 3)
    assert torch.equal(out, fn(dec, z))
    target = torch.randn(1, 300, 3, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    err = fd_relative_error(lambda code: chamfer_loss(fn(dec, code), target), [z])
    assert err < 1e-4


def test_complete_encoder_width(rng):
    enc = CompleteEncoder(EncoderConfig())
    Y = torch.as_tensor(rng.normal(size=(50, 3)), dtype=torch.float32)
    z = encode_complete(enc, Y)
    assert z.shape == (1, 96) and torch.equal(z, encode_complete(enc, Y))


def test_point_discriminator_permutation_invariant(rng):
    disc = init_uniform_(PointDiscriminator(), 4)
    X = torch.as_tensor(rng.normal(size=(2, 64, 3)), dtype=torch.float32)
    ref = discriminate_point(disc, X)
    assert ref.shape == (2,) and torch.equal(ref, discriminate_point(disc, X))
    for _ in range(5):
        assert torch.equal(discriminate_point(disc, X[:, torch.from_numpy(rng.permutation(64))]), ref)


def test_linear_point_discriminator_analytic_gradient(rng):
    disc = PointDiscriminator(linear=True).double()
    X = torch.as_tensor(rng.normal(size=(3, 40, 3)))
    norms = input_grad_norm(lambda x: discriminate_point(disc, x), X)
    w = disc.w.weight.detach()[0]
    # d/dx_i of w . mean(X) is w / N for every point
    expected = float(w.norm()) / np.sqrt(40)
    np.testing.assert_allclose(norms.detach().numpy(), expected, rtol=1e-12)


def test_code_discriminator_gradient_and_sensitivity(rng):
    disc = init_uniform_(CodeDiscriminator(), 2).double()
    z = torch.as_tensor(rng.normal(size=96))
    assert torch.equal(discriminate_code(disc, z), discriminate_code(disc, z))
    assert fd_relative_error(lambda v: discriminate_code(disc, v).sum(), [z]) < 1e-4
    with torch.no_grad():
        assert float(discriminate_code(disc, z + 0.1)) != float(discriminate_code(disc, z))


def test_parameter_set_roundtrip_and_role_mismatch():
    a = init_uniform_(CodeDiscriminator(), 1)
    b = init_uniform_(CodeDiscriminator(), 2)
    load_parameter_set(b, parameter_set(a))
    z = torch.ones(96)
    assert torch.equal(a(z), b(z))
    with pytest.raises(InvalidArgument):
        load_parameter_set(PartialEncoder(EncoderConfig()), parameter_set(a))


def test_init_is_seeded():
    a = init_uniform_(PointDecoder(8, 4), 7)
    b = init_uniform_(PointDecoder(8, 4), 7)
    c = init_uniform_(PointDecoder(8, 4), 8)
    sa, sb, sc = (parameter_set(m).arrays for m in (a, b, c))
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert not all(np.array_equal(sa[k], sc[k]) for k in sa)
