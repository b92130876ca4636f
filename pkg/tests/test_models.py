import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scvae import autodiff as ad
from scvae.models import (
    CNN_VAE,
    SCVAE,
    ArrayOps,
    ConvSpec,
    FireModuleSpec,
    FrozenModel,
    GraphOps,
    build,
    build_cnn_vae,
    build_scvae,
    cnn_vae_spec,
    decoder_forward,
    encoder_forward,
    param_count,
    scvae_spec,
)

GRID_TW = (4, 8, 16)
GRID_F = (6, 31, 37, 43, 73)


def conv_params(k, cin, cout):
    # kernel + bias + batch-norm gamma and beta
    return k * k * cin * cout + cout + 2 * cout


def cnn_count(tw, f, z):
    enc = conv_params(3, 1, 16) + conv_params(3, 16, 32) + conv_params(3, 32, 64) + conv_params(3, 64, 128)
    enc += (tw - 2) * (f - 2) * 128 * 2 * z + 2 * z
    dec = conv_params(3, z, 128) + conv_params(3, 128, 64) + conv_params(3, 64, 32)
    dec += conv_params(3, 32, 16) + conv_params(3, 16, 1)
    dec += 7 * 7 * 1 * 2 * tw * f + 2 * tw * f
    return enc + dec


def scvae_count(tw, f, z):
    enc = conv_params(1, 1, 16) + conv_params(1, 16, 16) + conv_params(3, 16, 32)
    enc += tw * f * 48 * 2 * z + 2 * z
    dec = conv_params(1, z, 16) + conv_params(1, 16, 16) + conv_params(3, 16, 1)
    dec += 17 * 2 * tw * f + 2 * tw * f
    return enc + dec


def graph_encode(model, x):
    P = {k: ad.constant(v) for k, v in model.params.items()}
    return encoder_forward(GraphOps, model.arch, ad.constant(x), P, model.copy().bn, False).value


def test_cnn_encoder_shape_walk_occupancy():
    text = cnn_vae_spec(16, 6).describe()
    walk = [line.rsplit("-> ", 1)[1] for line in text.splitlines() if line.strip().startswith("conv")]
    assert walk == ["16x6x16", "16x6x32", "16x6x64", "14x4x128"]
    assert "fully connected 7168 -> 200" in text


def test_cnn_decoder_spatial_walk():
    text = cnn_vae_spec(16, 6).describe()
    walk = [line.rsplit("-> ", 1)[1] for line in text.splitlines() if "trans conv" in line]
    assert [w.split("x")[0] for w in walk] == ["1", "1", "3", "5", "7"]
    assert "fully connected 49 -> 192" in text


def test_cnn_layer_counts():
    spec = cnn_vae_spec(8, 6)
    assert sum(isinstance(l, ConvSpec) for l in spec.encoder) == 4
    assert sum(isinstance(l, ConvSpec) for l in spec.decoder) == 5
    assert len(spec.encoder) == 5 and len(spec.decoder) == 6


def test_scvae_layer_structure():
    spec = scvae_spec(16, 6)
    fire, dense = spec.encoder
    assert isinstance(fire, FireModuleSpec) and fire.out_channels == 48
    tfire, _ = spec.decoder
    assert tfire.transposed and tfire.out_channels == 17
    text = spec.describe()
    assert "fire concat -> 16x6x48" in text
    assert "trans fire concat -> 1x1x17" in text
    assert "fully connected 4608 -> 200" in text


@pytest.mark.parametrize("tw,f", [(2, 6), (16, 2), (1, 1)])
def test_cnn_rejects_small_inputs(tw, f):
    with pytest.raises(ad.ShapeError, match="VALID"):
        build_cnn_vae(tw, f)


def test_scvae_accepts_tiny_inputs():
    m = build_scvae(1, 1, latent_dim=3)
    out = FrozenModel.from_model(m, np.float64).encode(np.zeros((2, 1, 1)))
    assert out.shape == (2, 6)


def test_stride_must_be_one():
    with pytest.raises(ValueError):
        ConvSpec(4, 3, stride=2)


@pytest.mark.parametrize("kind", [CNN_VAE, SCVAE])
def test_same_seed_same_bytes(kind):
    a, b = build(kind, 8, 6, seed=3), build(kind, 8, 6, seed=3)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = build(kind, 8, 6, seed=4)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params if k.endswith("kernel"))


def test_unknown_model_name():
    with pytest.raises(ValueError, match="unknown model"):
        build("VAE", 8, 6)


@pytest.mark.parametrize("tw", GRID_TW)
@pytest.mark.parametrize("f", GRID_F)
def test_param_counts_match_hand_formula(tw, f):
    assert param_count(build_cnn_vae(tw, f)) == cnn_count(tw, f, 100)
    assert param_count(build_scvae(tw, f)) == scvae_count(tw, f, 100)
    assert param_count(build_scvae(tw, f)) < param_count(build_cnn_vae(tw, f))


def test_occupancy16_counts():
    assert param_count(build_cnn_vae(16, 6)) == 1_753_867
    assert param_count(build_scvae(16, 6)) == 932_427


def test_dense_3_to_2_counts_8():
    from scvae.models import VaeModel

    m = VaeModel(scvae_spec(1, 1, 1), {"w": np.zeros((3, 2)), "b": np.zeros(2)})
    assert param_count(m) == 8


@settings(max_examples=25)
@given(tw=st.sampled_from(GRID_TW), f=st.integers(3, 80), kind=st.sampled_from([CNN_VAE, SCVAE]))
def test_shape_soundness(tw, f, kind):
    m = build(kind, tw, f, latent_dim=4)
    frozen = FrozenModel.from_model(m, np.float64)
    h = frozen.encode(np.zeros((2, tw, f)))
    assert h.shape == (2, 8)
    out = frozen.decode(np.zeros((2, 4)))
    assert out.shape == (2, 2 * tw * f)


@settings(max_examples=20)
@given(tw=st.sampled_from(GRID_TW), f=st.integers(1, 80))
def test_fire_module_preserves_extent(tw, f):
    m = build_scvae(tw, f, latent_dim=2)
    x = ArrayOps.reshape(np.zeros((1, tw, f)), (1, tw, f, 1))
    from scvae.models import run_stack

    fire_out = run_stack(ArrayOps, m.arch.encoder[:1], "encoder", x, m.params, m.bn, False)
    assert fire_out.shape == (1, tw, f, 48)


@pytest.mark.parametrize("kind", [CNN_VAE, SCVAE])
def test_frozen_matches_graph_forward(kind, rng):
    m = build(kind, 8, 5, latent_dim=6, seed=1)
    for s in m.bn.values():
        s.running_mean = rng.standard_normal(s.running_mean.shape)
        s.running_var = np.exp(rng.standard_normal(s.running_var.shape))
    x = rng.standard_normal((3, 8, 5))
    frozen = FrozenModel.from_model(m, np.float64)
    np.testing.assert_allclose(frozen.encode(x), graph_encode(m, x), rtol=1e-12, atol=1e-12)
    z = rng.standard_normal((3, 6))
    P = {k: ad.constant(v) for k, v in m.params.items()}
    g = decoder_forward(GraphOps, m.arch, ad.constant(z), P, m.copy().bn, False).value
    np.testing.assert_allclose(frozen.decode(z), g, rtol=1e-12, atol=1e-12)


def test_encoder_rejects_wrong_window_shape():
    m = build_scvae(8, 5, latent_dim=2)
    with pytest.raises(ad.ShapeError, match="expects windows"):
        FrozenModel.from_model(m).encode(np.zeros((1, 8, 6)))


def test_encoder_output_length_200():
    m = build_scvae(4, 6)
    assert FrozenModel.from_model(m).encode(np.zeros((1, 4, 6))).shape == (1, 200)


def test_describe_round_trips_through_spec():
    for builder in (cnn_vae_spec, scvae_spec):
        a = builder(8, 31)
        assert a.describe() == builder(8, 31).describe()
        assert a.describe().splitlines()[0] == f"arch {a.name}"
