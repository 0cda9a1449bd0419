import numpy as np
import pytest
import torch

from zonebench.errors import ConfigError, ShapeError
from zonebench.models import (
    ARCHITECTURE_ORDER,
    AttentionGate,
    Architecture,
    ModelConfig,
    attention_gate,
    build,
    count_parameters,
    forward,
)
from zonebench.train import cce_loss

TINY = dict(base_filters=4, depth=2, dense_growth_rate=4, input_size=16)
PAIRS = [
    (Architecture.UNET, Architecture.ATT_UNET),
    (Architecture.DENSE_UNET, Architecture.ATT_DENSE_UNET),
    (Architecture.R2U_NET, Architecture.ATT_R2U_NET),
]


def tiny(arch, **kw):
    return build(ModelConfig(arch, **{**TINY, **kw}))


def test_unknown_architecture():
    with pytest.raises(ConfigError):
        ModelConfig("VNET")


@pytest.mark.parametrize("bad", [dict(depth=0), dict(base_filters=0), dict(recurrence_steps=0), dict(num_classes=3)])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        ModelConfig(Architecture.UNET, **bad)


@pytest.mark.parametrize("arch", ARCHITECTURE_ORDER)
def test_tiny_shapes_and_softmax(arch, rng):
    m = tiny(arch)
    out = forward(m, rng.random((3, 16, 16, 1)))
    assert out.shape == (3, 16, 16, 5)
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-5)


@pytest.mark.parametrize("arch", ARCHITECTURE_ORDER)
def test_batch_independence_and_purity(arch, rng):
    m = tiny(arch)
    batch = rng.random((3, 16, 16, 1))
    full = forward(m, batch)
    single = forward(m, batch[1:2])
    np.testing.assert_allclose(full[1], single[0], atol=1e-5)
    np.testing.assert_array_equal(forward(m, batch), full)


def test_wrong_spatial_shape(rng):
    with pytest.raises(ShapeError):
        forward(tiny(Architecture.UNET), rng.random((1, 32, 32, 1)))


def test_init_is_deterministic():
    a = build(ModelConfig(Architecture.UNET, base_filters=8, depth=2, init_seed=5))
    b = build(ModelConfig(Architecture.UNET, base_filters=8, depth=2, init_seed=5))
    c = build(ModelConfig(Architecture.UNET, base_filters=8, depth=2, init_seed=6))
    pa, pb, pc = a.parameters, b.parameters, c.parameters
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert any(not np.array_equal(pa[k], pc[k]) for k in pa)


@pytest.mark.parametrize("base,att", PAIRS)
def test_attention_adds_parameters(base, att):
    assert count_parameters(tiny(att)) > count_parameters(tiny(base))
    assert count_parameters(build(ModelConfig(att))) > count_parameters(build(ModelConfig(base)))


def test_count_invariant_to_seed():
    for arch in ARCHITECTURE_ORDER:
        assert count_parameters(tiny(arch, init_seed=1)) == count_parameters(tiny(arch, init_seed=99))


def test_count_matches_parameter_arrays():
    m = tiny(Architecture.ATT_DENSE_UNET)
    assert count_parameters(m) == sum(v.size for v in m.parameters.values())


def test_recurrence_is_not_a_no_op(rng):
    x = rng.random((1, 16, 16, 1))
    one = forward(tiny(Architecture.R2U_NET, recurrence_steps=1), x)
    two = forward(tiny(Architecture.R2U_NET, recurrence_steps=2), x)
    assert np.abs(one - two).max() > 1e-4


def test_dense_block_concatenates():
    m = tiny(Architecture.DENSE_UNET, dense_layers_per_block=3, dense_growth_rate=5)
    block = m.net.encoders[0]
    assert [layer[0].in_channels for layer in block.layers] == [1, 6, 11]
    assert all(layer[0].out_channels == 5 for layer in block.layers)
    assert block.transition[0].in_channels == 16


# ---------------------------------------------------------------- attention gate


def saturated_gate(bias):
    gate = AttentionGate(6, 10, 3).double()
    with torch.no_grad():
        gate.psi.weight.zero_()
        gate.psi.bias.fill_(bias)
    return gate


def test_gate_all_ones_is_identity(rng):
    skip = rng.standard_normal((8, 8, 6))
    out = attention_gate(saturated_gate(1e4), skip, rng.standard_normal((4, 4, 10)))
    np.testing.assert_array_equal(out, skip)


def test_gate_all_zeros_annihilates(rng):
    skip = rng.standard_normal((8, 8, 6))
    out = attention_gate(saturated_gate(-1e4), skip, rng.standard_normal((4, 4, 10)))
    assert not out.any()


def test_gate_never_amplifies(rng):
    gate = AttentionGate(6, 10, 3).double()
    for _ in range(20):
        skip = rng.standard_normal((2, 8, 8, 6)) * 5
        out = attention_gate(gate, skip, rng.standard_normal((2, 4, 4, 10)))
        assert (np.abs(out) <= np.abs(skip)).all()


def test_gate_coefficients_shared_across_channels(rng):
    gate = AttentionGate(6, 10, 3).double()
    skip = np.ones((8, 8, 6))
    out = attention_gate(gate, skip, rng.standard_normal((4, 4, 10)))
    np.testing.assert_allclose(out, out[..., :1].repeat(6, axis=-1))
    assert ((out > 0) & (out < 1)).all()


def test_gate_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        attention_gate(AttentionGate(6, 10, 3).double(), rng.random((8, 8, 6)), rng.random((3, 3, 10)))


# ---------------------------------------------------------------- gradients


def finite_difference_check(arch, n_params=20, step=1e-6, seed=0):
    """Autograd vs central differences of the CCE loss on randomly chosen scalars.

    The step is small because wider steps straddle ReLU kinks; float64 keeps
    the truncation and rounding error far below the 1e-2 tolerance.
    """
    torch.manual_seed(seed)
    m = tiny(arch, init_seed=seed)
    net = m.net.double()
    net.train()
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.random((2, 1, 16, 16)))
    y = torch.nn.functional.one_hot(torch.from_numpy(rng.integers(0, 5, (2, 16, 16))), 5).permute(0, 3, 1, 2).double()

    def loss():
        return cce_loss(net(x), y)

    net.zero_grad()
    loss().backward()
    params = [p for p in net.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    flat = rng.choice(sizes.sum(), size=n_params, replace=False)
    bounds = np.cumsum(sizes)
    errors = []
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(bounds, f, side="right"))
            idx = int(f - (bounds[k - 1] if k else 0))
            # channels_last weights are not flat-viewable, so index by coordinate
            pos = np.unravel_index(idx, params[k].shape)
            p = params[k]
            analytic = float(p.grad[pos])
            orig = float(p[pos])
            p[pos] = orig + step
            up = float(loss())
            p[pos] = orig - step
            down = float(loss())
            p[pos] = orig
            numeric = (up - down) / (2 * step)
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    return np.array(errors)


@pytest.mark.parametrize("arch", ARCHITECTURE_ORDER)
def test_gradient_matches_finite_differences(arch):
    errors = finite_difference_check(arch)
    assert errors.max() < 1e-2, errors


def test_loss_gradient_wrt_logits(rng):
    logits = torch.from_numpy(rng.standard_normal((1, 5, 3, 3))).requires_grad_()
    target = torch.nn.functional.one_hot(torch.from_numpy(rng.integers(0, 5, (1, 3, 3))), 5).permute(0, 3, 1, 2).double()
    cce_loss(torch.softmax(logits, 1), target).backward()
    # closed form for softmax + CCE: (p - y) / n_pixels
    expected = (torch.softmax(logits, 1) - target).detach() / 9
    np.testing.assert_allclose(logits.grad.numpy(), expected.numpy(), atol=1e-10)
