import numpy as np
import pytest

from dfm.backbone import ConvBackbone, MLPBackbone, detach_features, make_backbone
from dfm.nn import Linear
from dfm.tensor import DimensionError, Tape, Tensor, gelu, mul, softmax_cross_entropy, sum_


def _naive_conv(x, W, b, stride=2, pad=1):
    """Nested-loop 3x3 convolution on [H, W, C] with weight rows ordered (di, dj, c)."""
    H, Wd, C = x.shape
    K = W.reshape(3, 3, C, -1)
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    Ho, Wo = (H + 2 * pad - 3) // stride + 1, (Wd + 2 * pad - 3) // stride + 1
    out = np.zeros((Ho, Wo, K.shape[-1]))
    for i in range(Ho):
        for j in range(Wo):
            for di in range(3):
                for dj in range(3):
                    for c in range(C):
                        out[i, j] += xp[i * stride + di, j * stride + dj, c] * K[di, dj, c]
            out[i, j] += b
    return out


def _gelu(a):
    return gelu(Tensor(a)).data


def test_mlp_output_shape_and_param_count():
    bb = MLPBackbone(10, 64, np.random.default_rng(0))
    assert bb(np.zeros((8, 10))).shape == (8, 64)
    assert bb.n_parameters() == 10 * 256 + 256 + 256 * 256 + 256 + 256 * 64 + 64


def test_zero_final_layer_gives_zero_features():
    bb = MLPBackbone(5, 4, np.random.default_rng(0))
    bb.out.weight.data[...] = 0
    bb.out.bias.data[...] = 0
    assert np.array_equal(bb(np.zeros((3, 5))).data, np.zeros((3, 4)))


def test_conv_shapes_for_both_image_sizes():
    rng = np.random.default_rng(0)
    assert ConvBackbone((1, 28, 28), 32, rng)(np.zeros((2, 1, 28, 28))).shape == (2, 32)
    assert ConvBackbone((1, 64, 64), 64, rng)(np.zeros((8, 1, 64, 64))).shape == (8, 64)
    assert make_backbone("conv2", (28, 28), 8, rng).in_shape == (1, 28, 28)


def test_conv_delta_impulse_matches_naive_convolution():
    rng = np.random.default_rng(1)
    bb = ConvBackbone((1, 12, 12), 6, rng)
    for conv in bb.convs:
        conv.bias.data[...] = rng.normal(size=conv.bias.shape)
    x = np.zeros((1, 1, 12, 12))
    x[0, 0, 5, 6] = 1.0
    h = x[0].transpose(1, 2, 0)
    for conv in bb.convs:
        h = _gelu(_naive_conv(h, conv.weight.data, conv.bias.data))
    expected = h.reshape(-1) @ bb.out.weight.data + bb.out.bias.data
    assert np.allclose(bb(x).data[0], expected, atol=1e-12)


def test_conv_random_input_matches_naive_convolution():
    rng = np.random.default_rng(2)
    bb = ConvBackbone((1, 9, 7), 3, rng)
    x = rng.normal(size=(2, 1, 9, 7))
    for n in range(2):
        h = x[n].transpose(1, 2, 0)
        for conv in bb.convs:
            h = _gelu(_naive_conv(h, conv.weight.data, conv.bias.data))
        assert np.allclose(bb(x).data[n], h.reshape(-1) @ bb.out.weight.data + bb.out.bias.data, atol=1e-12)


def test_shape_mismatch_raises():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        MLPBackbone(10, 4, rng)(np.zeros((2, 11)))
    with pytest.raises(DimensionError):
        ConvBackbone((1, 28, 28), 4, rng)(np.zeros((2, 1, 64, 64)))
    with pytest.raises(ValueError):
        make_backbone("resnet", (3,), 4, rng)


def test_detach_is_bitwise_equal_and_blocks_gradient():
    rng = np.random.default_rng(3)
    bb = MLPBackbone(4, 5, rng, widths=(8,))
    probe = Linear(5, 3, rng)
    x = rng.normal(size=(6, 4))
    bb.zero_grad()
    with Tape() as tape:
        f = bb(x)
        fd = detach_features(f)
        assert fd.data.tobytes() == f.data.tobytes() and not fd.requires_grad
        tape.backward(softmax_cross_entropy(probe(fd), [0, 1, 2, 0, 1, 2]))
    assert all(p.grad is None for p in bb.parameters())
    assert probe.weight.grad is not None


def test_backbone_gradients_accumulate_linearly():
    rng = np.random.default_rng(4)
    bb = MLPBackbone(4, 3, rng, widths=(6,))
    x = rng.normal(size=(5, 4))
    w1, w2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))

    def grads(*weights):
        bb.zero_grad()
        for w in weights:
            with Tape() as tape:
                tape.backward(sum_(mul(bb(x), Tensor(w))))
        return [p.grad.copy() for p in bb.parameters()]

    g1, g2, g12 = grads(w1), grads(w2), grads(w1, w2)
    for a, b, c in zip(g1, g2, g12):
        assert np.allclose(a + b, c, atol=1e-12)
