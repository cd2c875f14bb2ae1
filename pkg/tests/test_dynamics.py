import numpy as np
import pytest

from dgmn.dynamics import (dyn_out_channels, normalize_affinity,
                           normalize_affinity_backward, predict_dynamic)
from dgmn.errors import ConfigError
from dgmn.oracles import finite_diff_grad
from dgmn.tensor import Conv2dParams, init_conv, rng_fill


def rand(shape, seed):
    return rng_fill(shape, seed, "normal")


def test_joint_channel_count():
    # K = 9 taps, G = 4 groups: 36 weight channels + 9 logit channels
    assert dyn_out_channels(9, 4) == 45
    with pytest.raises(ConfigError):
        predict_dynamic(np.zeros((1, 8, 3, 3)), init_conv(8, 44, 3), 9, 4)


def test_zero_predictor_gives_uniform_affinities():
    conv = init_conv(8, 45, 3)
    w, logits = predict_dynamic(rand((1, 8, 4, 4), 1), conv, 9, 4)
    assert w.shape == (1, 9, 4, 4, 4)  # (n, K, G, h, w)
    assert np.all(w == 0.0)
    assert np.all(logits == 0.0)
    a = normalize_affinity(logits)
    assert np.allclose(a, 1.0 / 9.0, atol=1e-15)


def test_single_site_matrix_vector():
    conv = Conv2dParams(rand((45, 8, 3, 3), 2), rand((1, 1, 1, 45), 3)[0, 0, 0])
    feat = rand((1, 8, 1, 1), 4)
    w, logits = predict_dynamic(feat, conv, 9, 4)
    want = conv.weight[:, :, 1, 1] @ feat[0, :, 0, 0] + conv.bias
    got = np.concatenate([w.reshape(1, 36, 1, 1), logits], axis=1)[0, :, 0, 0]
    assert np.max(np.abs(got - want)) < 1e-12


def test_channel_layout_tap_major_group_minor():
    # channel j*G + g must land at weights[:, j, g]
    conv = init_conv(4, 9 * 2 + 9, 1)
    conv.bias = np.arange(27.0)
    w, logits = predict_dynamic(np.zeros((1, 4, 2, 2)), conv, 9, 2)
    for j in range(9):
        for g in range(2):
            assert np.all(w[:, j, g] == j * 2 + g)
    for j in range(9):
        assert np.all(logits[:, j] == 18 + j)


def test_normalize_examples():
    logits = np.zeros((1, 9, 2, 2))
    assert np.allclose(normalize_affinity(logits), 1.0 / 9.0, atol=1e-15)
    two = np.array([0.0, np.log(2.0)]).reshape(1, 2, 1, 1)
    a = normalize_affinity(two)
    assert abs(a[0, 0, 0, 0] - 1.0 / 3.0) < 1e-15
    assert abs(a[0, 1, 0, 0] - 2.0 / 3.0) < 1e-15
    a = normalize_affinity(rand((2, 9, 5, 5), 5) * 4)
    assert np.max(np.abs(a.sum(axis=1) - 1.0)) < 1e-12


def test_affinity_shift_invariance_per_site():
    logits = rand((1, 9, 3, 3), 6)
    a = normalize_affinity(logits)
    shifted = logits.copy()
    shifted[0, :, 1, 2] += 3.7  # one site only
    b = normalize_affinity(shifted)
    assert np.max(np.abs(a - b)) < 1e-12


def test_joint_prediction_channel_split_is_exact():
    # weight-channel perturbations never touch affinities and vice versa
    conv = Conv2dParams(rand((45, 8, 3, 3), 7) * 0.2, rand((1, 1, 1, 45), 8)[0, 0, 0])
    feat = rand((1, 8, 4, 4), 9)
    w0, l0 = predict_dynamic(feat, conv, 9, 4)
    a0 = normalize_affinity(l0)

    bumped = Conv2dParams(conv.weight.copy(), conv.bias.copy())
    bumped.weight[12] += 10.0  # a weight-output channel (12 < 36)
    bumped.bias[3] -= 5.0
    w1, l1 = predict_dynamic(feat, bumped, 9, 4)
    assert np.array_equal(normalize_affinity(l1), a0)
    assert not np.array_equal(w1, w0)

    bumped = Conv2dParams(conv.weight.copy(), conv.bias.copy())
    bumped.weight[40] += 10.0  # a logit-output channel (>= 36)
    w2, l2 = predict_dynamic(feat, bumped, 9, 4)
    assert np.array_equal(w2, w0)
    assert not np.array_equal(normalize_affinity(l2), a0)


def test_predict_normalize_composite_gradcheck():
    conv = Conv2dParams(rand((2 * 9 + 9, 4, 3, 3), 10) * 0.3,
                        rand((1, 1, 1, 27), 11)[0, 0, 0] * 0.3, dilation=2)
    feat = rand((1, 4, 3, 3), 12)
    probe_w = 1e-4 * rand((1, 9, 2, 3, 3), 13)
    probe_a = 1e-4 * rand((1, 9, 3, 3), 14)

    def run(weight, bias, x):
        p = Conv2dParams(weight, bias, dilation=2)
        w, logits = predict_dynamic(x, p, 9, 2)
        return w, normalize_affinity(logits)

    def f(t):
        w, a = run(t["weight"], t["bias"], t["feat"])
        return float(np.sum(probe_w * w) + np.sum(probe_a * a))

    # hand-derived backward of the composite
    from dgmn.dynamics import merge_dynamic_grads
    from dgmn.tensor import conv2d_backward
    w, a = run(conv.weight, conv.bias, feat)
    glogits = normalize_affinity_backward(a, probe_a)
    gout = merge_dynamic_grads(probe_w, glogits)
    gx, gw, gb = conv2d_backward(feat, conv, gout)
    report = finite_diff_grad(
        f, {"weight": conv.weight, "bias": conv.bias, "feat": feat},
        {"weight": gw, "bias": gb, "feat": gx}, eps=1e-5, threshold=1e-6)
    assert report.passed, report.to_json_dict()
