import numpy as np
import pytest
import torch
import torch.nn.functional as F

from dwiseg.errors import ShapeError, ValidationError
from dwiseg.network import (ArchSpec, backward, forward, init_params, maxout, param_count,
                            predict_proba, unpool)


def tiny(depth=1, filters=(3,), cin=2, classes=3, k=3, n=2, seed=0, dtype=torch.float64):
    net = init_params(ArchSpec(cin, classes, depth, filters, n, k, seed))
    return net.to(dtype)


# --- numpy oracle for a depth-1 network in inference mode ---

def np_conv(x, w, b):
    """Same-padded 2D cross-correlation, x (C,H,W), w (O,C,k,k)."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    h, wd = x.shape[1:]
    out = np.empty((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for i in range(h):
            for j in range(wd):
                out[o, i, j] = np.sum(xp[:, i:i + k, j:j + k] * w[o]) + b[o]
    return out


def np_block(x, block, eps=1e-5):
    def unit(i, inp):
        c = np_conv(inp, block.convs[i].weight.detach().numpy(), block.convs[i].bias.detach().numpy())
        bn = block.norms[i]
        c = ((c - bn.running_mean.numpy()[:, None, None]) / np.sqrt(bn.running_var.numpy()[:, None, None]
                                                                    + eps)
             * bn.weight.detach().numpy()[:, None, None] + bn.bias.detach().numpy()[:, None, None])
        a = block.acts[i].weight.detach().numpy()[:, None, None]
        return np.where(c >= 0, c, a * c)
    state = unit(0, x)
    for i in range(1, len(block.convs)):
        state = np.maximum(state, unit(i, state))
    return state


def np_depth1(net, x):
    e = np_block(x, net.encoders[0])
    c, h, w = e.shape
    pooled = np.empty((c, h // 2, w // 2))
    where = np.zeros_like(e, dtype=bool)
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                win = e[ch, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                a = int(np.argmax(win))  # first max in row-major order
                pooled[ch, i, j] = win.flat[a]
                where[ch, 2 * i + a // 2, 2 * j + a % 2] = True
    b = np_block(pooled, net.bottleneck)
    up = np.zeros_like(e)
    up[where] = np.repeat(np.repeat(b, 2, axis=1), 2, axis=2)[where]
    d = np_block(np.maximum(up, e), net.decoders[0])
    logits = np_conv(d, net.classifier.weight.detach().numpy(), net.classifier.bias.detach().numpy())
    z = np.exp(logits - logits.max(0))
    return z / z.sum(0)


def test_matches_numpy_oracle():
    net = tiny()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 2, 6, 8))
    got = forward(net, x)
    for i in range(2):
        np.testing.assert_allclose(got[i], np_depth1(net, x[i]), atol=1e-10)


def test_output_is_simplex_and_shape():
    net = init_params(ArchSpec(14, 8, 3, (8, 8, 8), 3, 5, 1))
    x = np.random.default_rng(1).normal(size=(2, 14, 64, 64)).astype(np.float32)
    p = forward(net, x)
    assert p.shape == (2, 8, 64, 64)
    assert np.all(p >= 0) and np.abs(p.sum(1) - 1).max() < 1e-5


def test_non_multiple_sizes_are_padded_and_cropped():
    net = tiny(depth=2, filters=(3, 4))
    x = np.random.default_rng(2).normal(size=(1, 2, 7, 9))
    p = forward(net, x)
    assert p.shape == (1, 3, 7, 9)
    padded = np.zeros((1, 2, 8, 12))
    padded[..., :7, :9] = x
    np.testing.assert_allclose(forward(net, padded)[..., :7, :9], p, atol=1e-12)


def test_wrong_channels():
    with pytest.raises(ShapeError):
        forward(tiny(), np.zeros((1, 5, 8, 8)))


def test_arch_validation():
    with pytest.raises(ValidationError):
        ArchSpec(1, 2, 2, (4,))
    with pytest.raises(ValidationError):
        ArchSpec(1, 2, 1, (4,), kernel_size=4)


def test_param_count_matches_module():
    for spec in (ArchSpec(14, 8), ArchSpec(7, 3, 2, (5, 6), 2, 3), ArchSpec(1, 2, 1, (4,), 1, 1,
                                                                            activation="relu")):
        net = init_params(spec)
        assert param_count(spec) == sum(p.numel() for p in net.parameters())


def test_param_count_hand_computed():
    # depth 1, width 2, one 1x1 conv per block, 1 input channel, 2 classes:
    # encoder conv 1*2+2, bottleneck 2*2+2, decoder 2*2+2, each + 2*2 bn + 2 prelu, classifier 2*2+2
    assert param_count(ArchSpec(1, 2, 1, (2,), 1, 1)) == (4 + 6 + 6) + 3 * 6 + 6


def test_unpool_matches_reference():
    rng = np.random.default_rng(3)
    x = torch.tensor(rng.normal(size=(2, 3, 6, 8)))
    y, idx = F.max_pool2d(x, 2, return_indices=True)
    # the reference kernel refuses to run while deterministic mode is on (set_threads enables it)
    was = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(False)
    try:
        ref = F.max_unpool2d(y, idx, 2, output_size=(6, 8))
    finally:
        torch.use_deterministic_algorithms(was)
    assert torch.equal(unpool(y, idx, (6, 8)), ref)


def test_deterministic_init_and_output():
    x = np.random.default_rng(4).normal(size=(1, 2, 8, 8))
    a, b, c = tiny(seed=5), tiny(seed=5), tiny(seed=6)
    assert np.array_equal(forward(a, x), forward(b, x))
    assert not np.array_equal(forward(a, x), forward(c, x))
    np.testing.assert_allclose(predict_proba(a, np.repeat(x, 5, 0), batch_size=2)[3], forward(a, x)[0])


def test_backward_finite_differences():
    net = tiny(seed=7)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2, 4, 4))
    g = rng.normal(size=(2, 3, 4, 4))
    grads = backward(net, x, g, training=False)
    f = lambda: float(np.sum(forward(net, x) * g))  # noqa: E731
    params = dict(net.named_parameters())
    for name in ("encoders.0.convs.0.weight", "decoders.0.norms.1.bias", "classifier.weight",
                 "bottleneck.acts.0.weight"):
        p = params[name]
        flat = p.data.view(-1)
        for i in (0, flat.numel() - 1):
            old = flat[i].item()
            h = 1e-6
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            dn = f()
            flat[i] = old
            num = (up - dn) / (2 * h)
            assert abs(num - grads[name].reshape(-1)[i]) <= 1e-6 * max(1.0, abs(num))


def test_backward_is_linear_in_loss_grad():
    net = tiny(seed=8)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 2, 4, 4))
    g1, g2 = rng.normal(size=(2, 1, 3, 4, 4))
    a, b = backward(net, x, g1, False), backward(net, x, g2, False)
    s = backward(net, x, g1 + g2, False)
    for k in s:
        np.testing.assert_allclose(s[k], a[k] + b[k], atol=1e-10)


def test_backward_leaves_running_stats():
    net = tiny(seed=9)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    backward(net, np.ones((2, 2, 4, 4)), np.ones((2, 3, 4, 4)))
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k])
    with pytest.raises(ShapeError):
        backward(net, np.ones((2, 2, 4, 4)), np.ones((2, 2, 4, 4)))


def test_zero_input_gives_uniform():
    net = init_params(ArchSpec(4, 5, 2, (3, 6), 3, 5))
    p = forward(net, np.zeros((2, 4, 8, 8), np.float32))
    np.testing.assert_allclose(p, 0.2, atol=1e-7)


def test_smallest_net_matches_oracle():
    net = tiny(filters=(2,), cin=1, classes=2)
    x = np.random.default_rng(10).normal(size=(1, 1, 4, 4))
    np.testing.assert_allclose(forward(net, x)[0], np_depth1(net, x[0]), atol=1e-10)


def test_maxout_properties_and_gradient_routing():
    rng = np.random.default_rng(11)
    a = torch.tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    b = torch.tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    m = maxout(a, b)
    assert torch.equal(m, maxout(b, a)) and torch.equal(maxout(a, a), a)
    assert torch.all(m >= a) and torch.all(m >= b)
    m.sum().backward()
    wins = (a > b).double()
    assert torch.equal(a.grad, wins) and torch.equal(b.grad, 1 - wins)


def test_backward_zero_and_batch_additivity():
    net = tiny(seed=12)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 2, 4, 4))
    g = rng.normal(size=(1, 3, 4, 4))
    assert all(not v.any() for v in backward(net, x, np.zeros_like(g)).values())
    # eval-mode normalisation keeps samples independent, so gradients add over the batch
    one = backward(net, x, g, training=False)
    two = backward(net, np.concatenate([x, x]), np.concatenate([g, g]), training=False)
    for k in one:
        np.testing.assert_allclose(two[k], 2 * one[k], atol=1e-12)


def test_translation_covariance():
    net = tiny(depth=1, filters=(3,), seed=13)
    x = np.random.default_rng(13).normal(size=(1, 2, 40, 40))
    s = 2  # shifts must respect the 2x2 pooling grid
    shifted = np.zeros_like(x)
    shifted[..., s:, :] = x[..., :-s, :]
    a, b = forward(net, x), forward(net, shifted)
    m = 12
    np.testing.assert_allclose(b[..., m + s:40 - m, :][..., m:40 - m],
                               a[..., m:40 - m - s, :][..., m:40 - m], atol=1e-12)


def test_thread_count_agreement():
    net = init_params(ArchSpec(7, 4, 2, (8, 8), 2, 5, seed=14))
    x = np.random.default_rng(14).normal(size=(4, 7, 32, 32)).astype(np.float32)
    before = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        a = forward(net, x)
        torch.set_num_threads(4)
        b = forward(net, x)
    finally:
        torch.set_num_threads(before)
    np.testing.assert_allclose(a, b, atol=1e-6)
