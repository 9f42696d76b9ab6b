import math

import numpy as np
import pytest
import torch

from endosr.errors import ConfigurationError, InputError, NumericalError
from endosr.networks import (SAB_KEYS, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
                             SpatialAttention, attention_map, backward, init_weights, sab_forward)


def random_sab_weights(c, rng, zero_g=False):
    w = {}
    for name in ("theta", "phi", "g"):
        w[f"{name}.weight"] = rng.normal(0, 0.5, (c, c, 1, 1))
        w[f"{name}.bias"] = rng.normal(0, 0.1, c)
    if zero_g:
        w["g.weight"][:] = 0
        w["g.bias"][:] = 0
    return w


def loop_sab(x, w):
    """Position-by-position transcription of the attention block (numpy, float64)."""
    c, h, wd = x.shape
    n = h * wd
    pos = [(i, j) for i in range(h) for j in range(wd)]

    def proj(name):
        m = np.zeros((n, c))
        for p, (i, j) in enumerate(pos):
            for o in range(c):
                acc = w[f"{name}.bias"][o]
                for k in range(c):
                    acc += w[f"{name}.weight"][o, k, 0, 0] * x[k, i, j]
                m[p, o] = acc
        return m

    theta, phi, g = proj("theta"), proj("phi"), proj("g")
    psi = np.zeros((n, n))
    for p in range(n):
        for q in range(n):
            psi[p, q] = max(0.0, sum(theta[p, k] * phi[q, k] for k in range(c)))
    logits = np.zeros((n, c))
    for p in range(n):
        for k in range(c):
            logits[p, k] = sum(psi[p, q] * g[q, k] for q in range(n))
    s = np.zeros((n, c))
    for k in range(c):
        col = [logits[p, k] for p in range(n)]
        top = max(col)
        z = sum(math.exp(v - top) for v in col)
        for p in range(n):
            s[p, k] = math.exp(col[p] - top) / z
    out = x.copy()
    for p, (i, j) in enumerate(pos):
        for k in range(c):
            out[k, i, j] += n * s[p, k] * g[p, k]
    return out


def test_sab_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(size=(4, 3, 3))
        w = random_sab_weights(4, rng)
        got = sab_forward(torch.from_numpy(x), {k: torch.from_numpy(v) for k, v in w.items()}).numpy()
        np.testing.assert_allclose(got, loop_sab(x, w), atol=1e-6, rtol=0)


def test_sab_zero_input_gives_zero_when_biases_vanish():
    rng = np.random.default_rng(1)
    w = random_sab_weights(3, rng)
    for k in w:
        if k.endswith("bias"):
            w[k][:] = 0
    out = sab_forward(torch.zeros(3, 4, 4, dtype=torch.float64), {k: torch.from_numpy(v) for k, v in w.items()})
    assert torch.count_nonzero(out) == 0


def test_sab_zero_g_is_identity():
    rng = np.random.default_rng(2)
    x = torch.from_numpy(rng.normal(size=(2, 5, 4, 6)))
    w = {k: torch.from_numpy(v) for k, v in random_sab_weights(5, rng, zero_g=True).items()}
    assert torch.equal(sab_forward(x, w), x)


def test_attention_columns_sum_to_one():
    rng = np.random.default_rng(3)
    x = torch.from_numpy(rng.normal(size=(3, 5, 5)))
    w = {k: torch.from_numpy(v) for k, v in random_sab_weights(3, rng).items()}
    s = attention_map(x, w)
    np.testing.assert_allclose(s.sum(dim=1).numpy(), 1.0, atol=1e-6)


def test_sab_shape_errors():
    rng = np.random.default_rng(4)
    w = {k: torch.from_numpy(v) for k, v in random_sab_weights(3, rng).items()}
    with pytest.raises(ConfigurationError):
        sab_forward(torch.zeros(4, 2, 2, dtype=torch.float64), w)
    del w["phi.bias"]
    with pytest.raises(ConfigurationError):
        sab_forward(torch.zeros(3, 2, 2, dtype=torch.float64), w)


def test_sab_pooling_only_above_threshold():
    rng = np.random.default_rng(5)
    x = torch.from_numpy(rng.normal(size=(1, 2, 8, 8)))
    w = {k: torch.from_numpy(v) for k, v in random_sab_weights(2, rng).items()}
    assert torch.equal(sab_forward(x, w, max_positions=64), sab_forward(x, w))
    pooled = sab_forward(x, w, max_positions=16)
    assert pooled.shape == x.shape
    assert not torch.equal(pooled, sab_forward(x, w))


@pytest.mark.parametrize("scale,depth,lr,hr", [(8, 8, 32, 256), (10, 8, 32, 320), (12, 8, 32, 384), (8, 7, 20, 160),
                                               (10, 5, 7, 70)])
def test_generator_output_shape(scale, depth, lr, hr):
    g = Generator(GeneratorConfig(scale=scale, depth=depth, base_filters=2, sab_max_positions=256)).eval()
    with torch.no_grad():
        out = g(torch.zeros(1, 3, lr, lr))
    assert out.shape == (1, 3, hr, hr)
    assert out.abs().max() <= 1


def test_generator_rejects_tiny_input():
    g = Generator(GeneratorConfig(base_filters=2, depth=8))
    with pytest.raises(ConfigurationError, match="minimum input size is 32x32"):
        g(torch.zeros(1, 3, 16, 16))
    with pytest.raises(InputError):
        g(torch.zeros(3, 32, 32))


def test_generator_eval_deterministic_train_dropout_seeded():
    cfg = GeneratorConfig(base_filters=2, depth=5, sab_max_positions=256)
    g = init_weights(Generator(cfg), torch.Generator().manual_seed(0))
    x = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(1)) * 2 - 1
    g.eval()
    with torch.no_grad():
        assert torch.equal(g(x), g(x))
    g.train()
    outs = []
    for _ in range(2):
        g.set_dropout_generator(torch.Generator().manual_seed(7))
        with torch.no_grad():
            outs.append(g(x))
    assert torch.equal(outs[0], outs[1])
    with torch.no_grad():
        assert not torch.equal(g(x), outs[0])


def test_layer_table_matches_architecture():
    cfg = GeneratorConfig()
    assert cfg.encoder_channels == [64, 128, 256, 512, 512, 512, 512, 512]
    assert cfg.decoder_channels == [1024, 1024, 1024, 1024, 512, 256, 128]
    specs = cfg.layer_specs()
    downs = [s for s in specs if s["kind"] == "conv_down"]
    assert not downs[0]["batchnorm"] and not downs[-1]["batchnorm"]
    assert all(s["batchnorm"] for s in downs[1:-1])
    assert specs[1]["kind"] == "sab"
    ups = [s for s in specs if s["kind"] == "conv_up"]
    assert [s["dropout_rate"] for s in ups] == [0.5, 0.5, 0.5, 0, 0, 0, 0]
    assert [s["skip_partner"] for s in ups] == [6, 5, 4, 3, 2, 1, 0]
    assert all(s["kernel"] == 4 and s["stride"] == 2 for s in downs + ups)
    assert "sab" not in [s["kind"] for s in GeneratorConfig(use_attention=False).layer_specs()]


def test_generator_module_structure():
    g = Generator(GeneratorConfig(base_filters=4))
    assert isinstance(g.down[0].norm, torch.nn.Identity)
    assert isinstance(g.down[-1].norm, torch.nn.Identity)
    assert all(isinstance(b.norm, torch.nn.BatchNorm2d) for b in g.down[1:-1])
    names = {n for n, _ in g.named_parameters()}
    assert {f"attention.{k}" for k in SAB_KEYS} <= names
    g2 = Generator(GeneratorConfig(base_filters=4, use_attention=False))
    assert not any(n.startswith("attention") for n, _ in g2.named_parameters())


def conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def test_discriminator_map_size_by_conv_arithmetic():
    cfg = DiscriminatorConfig(base_filters=4)
    n = 256
    for s in (2, 2, 2, 1, 1):
        n = conv_out(n, 4, s, 1)
    assert cfg.output_size(256) == n == 30
    d = Discriminator(cfg)
    out = d(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 256, 256))
    assert out.shape == (1, 1, 30, 30)
    assert cfg.receptive_field() == 70


def test_discriminator_zero_weights_half():
    d = Discriminator(DiscriminatorConfig(base_filters=4)).eval()
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    out = d(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 64, 64))
    assert torch.all(out == 0.5)


def test_discriminator_score_is_map_mean_and_deterministic():
    d = init_weights(Discriminator(DiscriminatorConfig(base_filters=4)), torch.Generator().manual_seed(0)).eval()
    lr, hr = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        m = d(lr, hr)
        assert torch.allclose(d.score(lr, hr), m.mean(dim=(1, 2, 3)))
        assert torch.equal(d.score(lr, hr), d.score(lr, hr))
        assert torch.all((m > 0) & (m < 1))


def test_discriminator_input_checks():
    d = Discriminator(DiscriminatorConfig(base_filters=2))
    with pytest.raises(InputError):
        d(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 60, 64))
    with pytest.raises(InputError):
        d(torch.zeros(1, 3, 8, 8), torch.zeros(2, 3, 64, 64))


def test_discriminator_first_layer_has_bias_no_norm():
    d = Discriminator()
    first = d.body[0]
    assert first.bias is not None and isinstance(d.body[1], torch.nn.LeakyReLU)
    assert d.body[2].bias is None and isinstance(d.body[3], torch.nn.BatchNorm2d)
    assert [m.out_channels for m in d.body if isinstance(m, torch.nn.Conv2d)] == [64, 128, 256, 512, 1]


def toy_generator():
    g = Generator(GeneratorConfig(base_filters=2, depth=3, sab_max_positions=None)).double().eval()
    init_weights(g, torch.Generator().manual_seed(3))
    with torch.no_grad():
        for p in g.parameters():
            p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(p.numel()), dtype=p.dtype) * 0.3)
    return g


def test_backward_matches_finite_differences():
    g = toy_generator()
    x = torch.rand(1, 3, 2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(4)) * 2 - 1
    grads = backward(g(x).sum(), g)
    params = dict(g.named_parameters())
    step = 1e-3
    checked = 0
    for name in ("down.0.conv.weight", "attention.theta.weight", "attention.g.weight", "up.1.conv.weight",
                 "output.weight", "down.1.norm.weight"):
        p = params[name]
        flat = p.detach().view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 4)):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + step
                up = g(x).sum().item()
                flat[idx] = orig - step
                down = g(x).sum().item()
                flat[idx] = orig
            fd = (up - down) / (2 * step)
            an = grads[name].view(-1)[idx].item()
            assert abs(an - fd) <= 1e-3 * max(1.0, abs(fd)), (name, idx, an, fd)
            checked += 1
    assert checked > 10


def test_sab_parameters_receive_gradient():
    g = toy_generator()
    x = torch.rand(1, 3, 2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(5)) * 2 - 1
    grads = backward(g(x).pow(2).sum(), g)
    for key in SAB_KEYS:
        assert grads[f"attention.{key}"].abs().sum() > 0


def test_constant_loss_zero_gradients():
    g = toy_generator()
    x = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
    grads = backward(g(x).sum() * 0.0, g)
    assert all(torch.count_nonzero(v) == 0 for v in grads.values())


def test_nan_gradient_names_layer():
    g = toy_generator()
    x = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
    with torch.no_grad():
        g.output.bias.fill_(float("nan"))
    with pytest.raises(NumericalError, match=r"non-finite gradient in layer \S+"):
        backward(g(x).sum(), g)


def test_init_weights_statistics():
    g = init_weights(Generator(GeneratorConfig(base_filters=16)), torch.Generator().manual_seed(0))
    w = torch.cat([m.weight.flatten() for m in g.modules() if isinstance(m, torch.nn.Conv2d)])
    assert abs(w.mean().item()) < 1e-3 and abs(w.std().item() - 0.02) < 1e-3
    bn = torch.cat([m.weight for m in g.modules() if isinstance(m, torch.nn.BatchNorm2d)])
    assert abs(bn.mean().item() - 1) < 5e-3


def test_spatial_attention_module_uses_functional_form():
    m = SpatialAttention(3).double()
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    assert torch.equal(m(x), sab_forward(x, dict(m.named_parameters())))
