import numpy as np
import pytest
import torch
import torch.nn.functional as F
from helpers import analytic_grad, central_diff, rel_err
from hypothesis import given
from hypothesis import strategies as st

from slicevolume.adain import instance_stats, make_code
from slicevolume.networks import (
    ConfigError,
    Critic,
    CriticConfig,
    Generator,
    GeneratorConfig,
    check_uniform_coverage,
    contribution_counts,
    critic_forward,
    generator_forward,
    to_phase_volume,
    transpose_conv_size,
)
from slicevolume.volume import Patch2D, PhaseVolume


def small_gen(**kw):
    cfg = dict(channels=[4, 8, 6, 3], kernels=[4, 4, 4], strides=[2, 2, 2], paddings=[2, 2, 3],
               mlp_width=16)
    cfg.update(kw)
    return GeneratorConfig(**cfg)


def small_critic(l=16, ch=(3, 4, 8)):
    n = len(ch) - 1
    return CriticConfig(channels=list(ch), kernels=[4] * n, strides=[2] * n, paddings=[1] * n,
                        patch_size=l)


def test_default_generator_is_64_cubed():
    cfg = GeneratorConfig()
    assert cfg.layer_sizes() == [4, 6, 10, 18, 34, 64]
    assert cfg.output_size() == 64
    assert cfg.site_channels() == [512, 256, 128, 64]


def test_default_critic_reduces_to_2x2():
    assert CriticConfig().final_size() == 2


def test_default_forward_shape():
    torch.manual_seed(0)
    g = Generator(GeneratorConfig())
    z = g.sample_noise(1)
    assert z.shape == (1, 64, 4, 4, 4)
    with torch.no_grad():
        out = g(z, make_code(0.35))
    assert out.shape == (1, 3, 64, 64, 64)
    s = out.sum(1)
    assert torch.allclose(s, torch.ones_like(s), atol=1e-5)


@st.composite
def gen_configs(draw):
    n = draw(st.integers(1, 3))
    channels = [draw(st.integers(1, 4)) for _ in range(n)] + [draw(st.integers(2, 4))]
    ks = [draw(st.integers(1, 4)) for _ in range(n)]
    ss = [draw(st.integers(1, 3)) for _ in range(n)]
    ps = [draw(st.integers(0, 2)) for _ in range(n)]
    seed = draw(st.integers(1, 4))
    return channels, ks, ss, ps, seed


@given(gen_configs())
def test_output_size_matches_arithmetic(args):
    channels, ks, ss, ps, seed = args
    try:
        cfg = GeneratorConfig(channels=channels, kernels=ks, strides=ss, paddings=ps,
                              seed_size=seed, mlp_width=8, mlp_depth=1)
    except ConfigError:
        return
    n = seed
    for k, s, p in zip(ks, ss, ps):
        n = s * (n - 1) + k - 2 * p
    g = Generator(cfg)
    with torch.no_grad():
        out = g(g.sample_noise(2), make_code(0.2))
    assert out.shape == (2, channels[-1], n, n, n)
    assert torch.all(out > 0) and torch.all(out < 1)
    assert torch.allclose(out.sum(1), torch.ones(2, n, n, n), atol=1e-5)


def test_config_rejects_vanishing_intermediate_size():
    # the last layer's padding would bring the size back up, but layer 3 has none
    with pytest.raises(ConfigError):
        GeneratorConfig(channels=[1, 1, 1, 2], kernels=[1, 1, 3], strides=[1, 1, 1],
                        paddings=[0, 1, 0], seed_size=1)
    with pytest.raises(ConfigError):
        CriticConfig(channels=[3, 4, 4], kernels=[4, 1], strides=[4, 1], paddings=[0, 2],
                     patch_size=2)


def test_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(channels=[4, 8, 1], kernels=[4, 4], strides=[2, 2], paddings=[1, 1])
    with pytest.raises(ConfigError):
        GeneratorConfig(channels=[4, 3], kernels=[4, 4], strides=[2], paddings=[1])
    with pytest.raises(ConfigError):
        GeneratorConfig(channels=[4, 3], kernels=[1], strides=[1], paddings=[3], seed_size=1)
    with pytest.raises(ConfigError):
        CriticConfig(channels=[3, 4, 4, 4], kernels=[4] * 3, strides=[2] * 3, paddings=[0] * 3,
                     patch_size=8)


def test_noise_support():
    g = Generator(small_gen(noise_low=-1.0, noise_high=2.0))
    z = g.sample_noise(64, torch.Generator().manual_seed(0))
    assert z.min() >= -1 and z.max() < 2
    assert z.min() < -0.9 and z.max() > 1.9


def test_generator_deterministic_and_conditioned():
    torch.manual_seed(0)
    g = Generator(small_gen())
    z = g.sample_noise(1, torch.Generator().manual_seed(1))
    with torch.no_grad():
        a = generator_forward(z, make_code(0.15), g)
        b = generator_forward(z, make_code(0.15), g)
        c = generator_forward(z, make_code(0.6), g)
    assert torch.equal(a, b)
    assert (a - c).abs().max() > 0
    pv = to_phase_volume(a)
    assert isinstance(pv, PhaseVolume) and pv.dims == a.shape[2:]


def test_identity_styles_reproduce_plain_pipeline():
    """With each channel's own statistics as style, AdaIN is (nearly) a no-op."""
    torch.manual_seed(0)
    cfg = small_gen(eps=0.0)
    g = Generator(cfg).double()
    z = g.sample_noise(1).double()
    x = z
    styles = []
    for conv in g.convs[:-1]:
        h = conv(x)
        mu, sig = instance_stats(h, dim=(2, 3, 4))
        styles.append((mu.flatten(1), sig.flatten(1)))
        x = F.relu(h)
    plain = torch.softmax(g.convs[-1](x), 1)
    with torch.no_grad():
        out, feats = g(z, styles=styles, return_features=True)
    assert torch.allclose(out, plain, atol=1e-5)
    # layer by layer
    x = z
    for conv, f in zip(g.convs[:-1], feats):
        x = F.relu(conv(x))
        assert torch.allclose(f, x, atol=1e-5)


def test_generator_shape_errors():
    g = Generator(small_gen())
    with pytest.raises(ValueError):
        g(torch.zeros(1, 5, 4, 4, 4), make_code(0.1))
    with pytest.raises(ValueError):
        g(g.sample_noise(1))


def test_critic_zero_weights_score_zero():
    c = Critic(small_critic())
    for p in c.parameters():
        torch.nn.init.zeros_(p)
    x = torch.rand(5, 3, 16, 16)
    assert torch.all(c(x) == 0)


def test_critic_one_scalar_per_patch_and_deterministic(rng):
    torch.manual_seed(0)
    c = Critic(small_critic())
    patch = Patch2D(rng.random((3, 16, 16)).astype(np.float32))
    s1 = critic_forward(patch, c)
    s2 = critic_forward(patch, c)
    assert s1.ndim == 0 and torch.isfinite(s1) and torch.equal(s1, s2)
    assert c(torch.rand(7, 3, 16, 16)).shape == (7,)


def test_critic_size_mismatch():
    c = Critic(small_critic())
    with pytest.raises(ValueError):
        c(torch.rand(1, 3, 15, 16))
    with pytest.raises(ValueError):
        c(torch.rand(1, 2, 16, 16))


def test_critic_input_gradient_fd():
    torch.manual_seed(0)
    c = Critic(small_critic(l=8, ch=(2, 3, 4))).double()
    x = torch.rand(1, 2, 8, 8, dtype=torch.float64)
    assert rel_err(analytic_grad(c, x), central_diff(c, x)) < 1e-3


def _brute_counts(n_in, k, s, p):
    """Contribution counts from a transpose convolution of ones with a ones kernel."""
    ones = torch.ones(1, 1, n_in, dtype=torch.float64)
    w = torch.ones(1, 1, k, dtype=torch.float64)
    return F.conv_transpose1d(ones, w, stride=s, padding=p)[0, 0].round().long().tolist()


@given(st.integers(1, 8), st.integers(1, 6), st.integers(1, 4), st.integers(0, 3))
def test_contribution_counts_match_conv_transpose(n_in, k, s, p):
    if transpose_conv_size(n_in, k, s, p) < 1:
        return
    assert contribution_counts(n_in, k, s, p).tolist() == _brute_counts(n_in, k, s, p)


def test_3d_coverage_is_outer_product():
    ones = torch.ones(1, 1, 4, 4, 4, dtype=torch.float64)
    w = torch.ones(1, 1, 4, 4, 4, dtype=torch.float64)
    out = F.conv_transpose3d(ones, w, stride=2, padding=2)[0, 0]
    c = torch.tensor(contribution_counts(4, 4, 2, 2), dtype=torch.float64)
    assert torch.equal(out, c[:, None, None] * c[None, :, None] * c[None, None, :])


def _one_layer(k, s, p, n_in=4):
    return GeneratorConfig(channels=[2, 3], kernels=[k], strides=[s], paddings=[p], seed_size=n_in)


def test_coverage_examples():
    r = check_uniform_coverage(_one_layer(4, 2, 2))
    assert r.passed and r.layers[0].uniform
    r = check_uniform_coverage(_one_layer(3, 2, 1))
    assert not r.passed and not r.layers[0].kernel_divisible
    r = check_uniform_coverage(_one_layer(2, 2, 0))
    assert r.passed and set(r.layers[0].counts) == {1}


def test_default_configs_pass_coverage():
    assert check_uniform_coverage(GeneratorConfig()).passed
    smoke = GeneratorConfig(channels=[16, 64, 32, 16, 3], kernels=[4] * 4, strides=[2] * 4,
                            paddings=[2, 2, 2, 3])
    assert smoke.output_size() == 32
    assert check_uniform_coverage(smoke).passed


def test_coverage_flags_thin_padding():
    r = check_uniform_coverage(_one_layer(4, 2, 1))
    assert not r.passed and not r.layers[0].padding_covers_edges and not r.layers[0].uniform
