import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from modtr.fusion import (
    FusionKind,
    broadcast_channels,
    fuse,
    fuse_add,
    fuse_hadamard,
    fuse_softmax_weighted,
)

# e / (1 + e), evaluated with mpmath at 30 digits
E_OVER_ONE_PLUS_E = 0.731058578630004879251159241822


def const(value, shape=(3, 5, 4)):
    return torch.full(shape, value, dtype=torch.float64)


def test_broadcast_replicates_single_channel():
    x = const(0.4, (1, 6, 7))
    y = broadcast_channels(x)
    assert y.shape == (3, 6, 7)
    assert torch.all(y == 0.4)


def test_broadcast_three_channels_is_identity():
    x = torch.rand(3, 4, 4, dtype=torch.float64)
    assert broadcast_channels(x) is x


def test_broadcast_rejects_two_channels():
    with pytest.raises(ValueError, match="unsupported channel count"):
        broadcast_channels(torch.rand(2, 4, 4))


def test_broadcast_batched():
    x = torch.rand(2, 1, 4, 5)
    y = broadcast_channels(x)
    assert y.shape == (2, 3, 4, 5)
    assert torch.equal(y[:, 2], x[:, 0])


def test_add_examples():
    x = torch.rand(3, 5, 4, dtype=torch.float64)
    assert torch.equal(fuse_add(torch.zeros_like(x), x), x)
    assert torch.all(fuse_add(const(0.6), const(0.7)) == 1.0)
    assert torch.all(fuse_add(const(0.25), const(0.25)) == 0.5)


def test_add_unclamped_flag():
    out = fuse_add(const(0.6), const(0.7), clamp=False)
    assert torch.allclose(out, const(1.3))


def test_hadamard_examples():
    x = torch.rand(3, 5, 4, dtype=torch.float64)
    assert torch.equal(fuse_hadamard(torch.ones_like(x), x), x)
    assert torch.equal(fuse_hadamard(torch.zeros_like(x), x), torch.zeros_like(x))
    assert torch.all(fuse_hadamard(const(0.5), const(0.5)) == 0.25)


def test_softmax_examples():
    a = const(0.37)
    # (a e^a + a e^a) / (2 e^a) equals a up to rounding of the division
    assert torch.allclose(fuse_softmax_weighted(a, a), a, atol=1e-15, rtol=0)
    out = fuse_softmax_weighted(const(0.0), const(1.0))
    assert torch.allclose(out, const(E_OVER_ONE_PLUS_E), atol=1e-15, rtol=0)


@pytest.mark.parametrize("op", [fuse_add, fuse_hadamard, fuse_softmax_weighted])
def test_shape_mismatch(op):
    with pytest.raises(ValueError, match="shape mismatch"):
        op(torch.rand(3, 4, 4), torch.rand(3, 4, 5))


def test_fuse_dispatch():
    x1 = torch.rand(1, 6, 6, dtype=torch.float64)
    out = fuse(FusionKind.HADAMARD, torch.ones(3, 6, 6, dtype=torch.float64), x1)
    assert torch.equal(out, x1.expand(3, -1, -1))
    x3 = torch.rand(3, 6, 6, dtype=torch.float64)
    assert torch.equal(fuse("add", torch.zeros_like(x3), x3), x3)
    assert torch.allclose(fuse(FusionKind.SOFTMAX, x3, x3), x3, atol=1e-15, rtol=0)


def test_fuse_rejects_non_rgb_translation():
    with pytest.raises(ValueError):
        fuse("add", torch.rand(1, 4, 4), torch.rand(1, 4, 4))
    with pytest.raises(ValueError, match="unsupported channel count"):
        fuse("add", torch.rand(3, 4, 4), torch.rand(2, 4, 4))


def test_fusion_kind_parse():
    assert FusionKind.parse("Softmax") is FusionKind.SOFTMAX
    assert FusionKind.parse(FusionKind.ADD) is FusionKind.ADD
    with pytest.raises(ValueError):
        FusionKind.parse("concat")


unit_images = arrays(np.float64, (3, 4, 5), elements=st.floats(0.0, 1.0))


@settings(max_examples=200, deadline=None)
@given(t=unit_images, x=unit_images)
def test_properties(t, x):
    t, x = torch.from_numpy(t), torch.from_numpy(x)
    for kind in FusionKind:
        out = fuse(kind, t, x)
        assert torch.all(out >= 0) and torch.all(out <= 1)
    s = fuse_softmax_weighted(t, x)
    assert torch.allclose(s, fuse_softmax_weighted(x, t), atol=1e-12, rtol=0)
    assert torch.all(s >= torch.minimum(t, x) - 1e-12)
    assert torch.all(s <= torch.maximum(t, x) + 1e-12)


def numeric_grad(f, t, x, h=1e-4):
    """Central differences of sum(f(t, x)) w.r.t. each element of t."""
    g = np.zeros(t.size)
    flat = t.reshape(-1)
    for i in range(flat.size):
        tp, tm = flat.copy(), flat.copy()
        tp[i] += h
        tm[i] -= h
        fp = f(tp.reshape(t.shape), x).sum()
        fm = f(tm.reshape(t.shape), x).sum()
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(t.shape)


NUMPY_OPS = {
    FusionKind.ADD: lambda t, x: np.clip(t + x, 0, 1),
    FusionKind.HADAMARD: lambda t, x: t * x,
    FusionKind.SOFTMAX: lambda t, x: (t * np.exp(t) + x * np.exp(x)) / (np.exp(t) + np.exp(x)),
}


@pytest.mark.parametrize("kind", list(FusionKind))
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(0)
    t = rng.uniform(0.01, 0.99, (3, 4, 5))
    x = rng.uniform(0.01, 0.99, (3, 4, 5))
    if kind is FusionKind.ADD:
        # keep away from the clamp kink
        x = np.where(np.abs(t + x - 1) < 1e-2, x * 0.5, x)
    tt = torch.tensor(t, requires_grad=True)
    fuse(kind, tt, torch.tensor(x)).sum().backward()
    num = numeric_grad(NUMPY_OPS[kind], t, x)
    ana = tt.grad.numpy()
    rel = np.abs(ana - num) / np.maximum(np.abs(num), 1e-8)
    assert np.all(rel <= 1e-3)
