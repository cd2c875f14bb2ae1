import numpy as np
import pytest

from dgmn.errors import ConfigError, UsageError
from dgmn.oracles import (GradCheckReport, conv2d_naive, dmc_equivalence_errors,
                          finite_diff_grad, init_nonlocal, naive_dmc,
                          nonlocal_attention, nonlocal_forward)
from dgmn.sampler import base_grid, sample_field
from dgmn.tensor import conv2d, init_conv, rng_fill, softmax_lastk


def rand(shape, seed):
    return rng_fill(shape, seed, "normal")


# ---------------------------------------------------------------------------
# naive_dmc
# ---------------------------------------------------------------------------

def test_naive_dmc_center_identity():
    value = rand((1, 4, 4, 4), 1)
    coords = sample_field(base_grid(1, 3), 1, 4, 4)
    aff = np.zeros((1, 9, 4, 4))
    aff[:, 4] = 1.0
    out = naive_dmc(value, coords, aff, np.ones((9, 2)), 2)
    assert np.max(np.abs(out - value)) < 1e-15


def test_naive_dmc_raw_zero_affinities():
    value = rand((1, 2, 3, 3), 2)
    coords = sample_field(base_grid(1, 3), 1, 3, 3)
    out = naive_dmc(value, coords, np.zeros((1, 9, 3, 3)), np.ones((9, 1)), 1)
    assert np.all(out == 0.0)


def test_dmc_equivalence_randomized():
    errors = dmc_equivalence_errors(seed=123, cases=40)
    assert len(errors) == 40
    assert max(errors) < 1e-10


# ---------------------------------------------------------------------------
# non-local reference
# ---------------------------------------------------------------------------

def test_nonlocal_zero_out_conv_is_identity():
    nl = init_nonlocal(8, seed=1)
    nl.out.weight[...] = 0.0
    feat = rand((1, 8, 3, 4), 3)
    assert np.array_equal(nonlocal_forward(feat, nl), feat)


def test_nonlocal_attention_rows_sum_to_one():
    nl = init_nonlocal(8, seed=2)
    attn = nonlocal_attention(rand((2, 8, 3, 3), 4), nl)
    assert np.max(np.abs(attn.sum(axis=2) - 1.0)) < 1e-12


def test_nonlocal_matches_nested_loop():
    nl = init_nonlocal(2, seed=5)
    feat = rand((1, 2, 2, 2), 6)
    got = nonlocal_forward(feat, nl)

    # independent scalar-loop evaluation
    n, c, h, w = feat.shape
    half = 1
    npos = h * w
    flat = feat.reshape(c, npos)
    th = nl.theta.weight.reshape(half, c) @ flat + nl.theta.bias[:, None]
    ph = nl.phi.weight.reshape(half, c) @ flat + nl.phi.bias[:, None]
    gv = nl.g.weight.reshape(half, c) @ flat + nl.g.bias[:, None]
    want = feat.copy()
    for i in range(npos):
        scores = [sum(th[d, i] * ph[d, j] for d in range(half)) for j in range(npos)]
        m = max(scores)
        e = [np.exp(s - m) for s in scores]
        z = sum(e)
        agg = [sum(e[j] / z * gv[d, j] for j in range(npos)) for d in range(half)]
        for co in range(c):
            val = sum(nl.out.weight[co, d, 0, 0] * agg[d] for d in range(half))
            want[0, co, i // w, i % w] += val + nl.out.bias[co]
    assert np.max(np.abs(got - want)) < 1e-10


def test_nonlocal_permutation_equivariance():
    # attention has no positional structure: a joint spatial permutation of
    # input pixels permutes the output the same way
    nl = init_nonlocal(6, seed=7)
    feat = rand((1, 6, 3, 4), 8)
    n, c, h, w = feat.shape
    perm = np.random.Generator(np.random.Philox(key=np.uint64(9))).permutation(h * w)
    flat = feat.reshape(n, c, h * w)
    permuted = flat[:, :, perm].reshape(n, c, h, w)
    out = nonlocal_forward(feat, nl).reshape(n, c, h * w)
    out_p = nonlocal_forward(permuted, nl).reshape(n, c, h * w)
    assert np.max(np.abs(out[:, :, perm] - out_p)) < 1e-10


def test_nonlocal_odd_channels_rejected():
    with pytest.raises(ConfigError):
        init_nonlocal(7)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def test_finite_diff_quadratic():
    x = np.array([1.0, -2.0])
    report = finite_diff_grad(lambda t: float(np.sum(t["x"] ** 2)),
                              {"x": x}, {"x": 2 * x}, eps=1e-5, threshold=1e-9)
    assert report.passed
    assert report.rows[0].max_rel_err < 1e-9


def test_finite_diff_constant():
    report = finite_diff_grad(lambda t: 3.0, {"x": np.ones(4)},
                              {"x": np.zeros(4)}, eps=1e-5, threshold=1e-9)
    assert report.passed
    assert report.rows[0].max_abs_err == 0.0


def test_finite_diff_detects_wrong_gradient():
    x = np.array([1.0, 2.0])
    report = finite_diff_grad(lambda t: float(np.sum(t["x"] ** 2)),
                              {"x": x}, {"x": 3 * x}, eps=1e-5, threshold=1e-6)
    assert not report.passed


def test_finite_diff_nonfinite_failure_names_coordinate():
    def f(t):
        with np.errstate(invalid="ignore"):
            return float(np.log(t["x"][1]))  # goes nan when x[1] - eps < 0

    with pytest.raises(UsageError, match=r"x\[\(1,\)\]"):
        finite_diff_grad(f, {"x": np.array([1.0, 5e-6])},
                         {"x": np.zeros(2)}, eps=1e-5)


def test_finite_diff_missing_gradient():
    with pytest.raises(UsageError):
        finite_diff_grad(lambda t: 0.0, {"x": np.ones(2)}, {}, eps=1e-5)


def test_finite_diff_on_conv_primitive():
    x = rand((1, 2, 3, 3), 10)
    p = init_conv(2, 3, 3, seed=11, dist="normal", std=0.4)
    probe = rand((1, 3, 3, 3), 12)
    from dgmn.tensor import conv2d_backward
    gx, gw, gb = conv2d_backward(x, p, probe)

    def f(t):
        from dgmn.tensor import Conv2dParams
        return float(np.sum(probe * conv2d(t["x"], Conv2dParams(t["w"], t["b"]))))

    report = finite_diff_grad(f, {"x": x, "w": p.weight, "b": p.bias},
                              {"x": gx, "w": gw, "b": gb}, eps=1e-5, threshold=1e-6)
    assert report.passed


def test_gradcheck_report_roundtrip():
    report = finite_diff_grad(lambda t: float(np.sum(t["x"] ** 2)),
                              {"x": np.array([[1.0, -2.0], [0.5, 3.0]])},
                              {"x": np.array([[2.0, -4.0], [1.0, 6.0]])},
                              eps=1e-5, threshold=1e-6)
    d = report.to_json_dict()
    back = GradCheckReport.from_json_dict(d)
    assert back.to_json_dict() == d
    csv_text = report.to_csv_text()
    back2 = GradCheckReport.from_csv_text(csv_text, report.eps, report.threshold)
    assert back2.to_csv_text() == csv_text


def test_conv2d_naive_channel_mismatch():
    with pytest.raises(ConfigError):
        conv2d_naive(np.zeros((1, 3, 2, 2)), init_conv(2, 2, 1))
