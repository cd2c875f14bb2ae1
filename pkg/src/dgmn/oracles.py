"""Independent brute-force references and the gradient checker.

Everything here is deliberately written as plain nested loops over scalar
values, sharing no code with the vectorized implementations it checks.
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Conv2dParams, conv2d, init_conv, rng_fill, derive_seed, softmax_lastk


def conv2d_naive(x: np.ndarray, p: Conv2dParams) -> np.ndarray:
    """Direct nested-loop same-padded dilated grouped convolution."""
    n, c_in, h, w = x.shape
    if c_in != p.c_in:
        raise ConfigError(f"conv2d_naive: input has {c_in} channels, expected {p.c_in}")
    k, d = p.k, p.dilation
    half = (k - 1) // 2
    cin_g = p.c_in // p.groups
    cout_g = p.c_out // p.groups
    y = np.zeros((n, p.c_out, h, w))
    for b in range(n):
        for co in range(p.c_out):
            g = co // cout_g
            for i in range(h):
                for j in range(w):
                    acc = p.bias[co]
                    for u in range(k):
                        ii = i + (u - half) * d
                        if ii < 0 or ii >= h:
                            continue
                        for v in range(k):
                            jj = j + (v - half) * d
                            if jj < 0 or jj >= w:
                                continue
                            for ci in range(cin_g):
                                acc += p.weight[co, ci, u, v] * x[b, g * cin_g + ci, ii, jj]
                    y[b, co, i, j] = acc
    return y


def _bilinear_at(plane: np.ndarray, y: float, x: float) -> float:
    """Scalar bilinear read of one channel plane, zero outside the image."""
    h, w = plane.shape
    y0 = int(np.floor(y))
    x0 = int(np.floor(x))
    ty = y - y0
    tx = x - x0
    val = 0.0
    for dy, wy in ((0, 1.0 - ty), (1, ty)):
        for dx, wx in ((0, 1.0 - tx), (1, tx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                val += wy * wx * plane[yy, xx]
    return val


def naive_dmc(value_map: np.ndarray, coords: np.ndarray, affinities: np.ndarray,
              weights: np.ndarray, groups: int) -> np.ndarray:
    """Scalar-loop message aggregation over (site, tap, channel).

    coords is the absolute (n, K, 2, h, w) sample field; affinities are taken
    as given (no normalization); weights is (n, K, G, h, w) or a shared (K, G)
    table. Intended purely as a reference for the vectorized path.
    """
    n, c, h, w = value_map.shape
    K = coords.shape[1]
    if c % groups != 0:
        raise ConfigError(f"channels {c} not divisible by groups {groups}")
    m = c // groups
    per_position = weights.ndim == 5
    out = np.zeros((n, c, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for t in range(K):
                    a = affinities[b, t, i, j]
                    sy = coords[b, t, 0, i, j]
                    sx = coords[b, t, 1, i, j]
                    for ch in range(c):
                        g = ch // m
                        wgt = weights[b, t, g, i, j] if per_position else weights[t, g]
                        out[b, ch, i, j] += a * wgt * _bilinear_at(value_map[b, ch], sy, sx)
    return out


# ---------------------------------------------------------------------------
# Fully-connected attention baseline
# ---------------------------------------------------------------------------

class NonLocalParams:
    """Embedded-Gaussian attention block with a C/2 bottleneck."""

    def __init__(self, theta, phi, g, out):
        self.theta = theta
        self.phi = phi
        self.g = g
        self.out = out


def init_nonlocal(channels: int, seed: int = 0, std: float = 0.1) -> NonLocalParams:
    if channels % 2 != 0:
        raise ConfigError(f"attention baseline needs an even channel count, got {channels}")
    half = channels // 2

    def conv(c_in, c_out, label):
        p = init_conv(c_in, c_out, 1)
        p.weight = rng_fill(p.weight.shape, derive_seed(seed, label), "normal", std=std)
        return p

    return NonLocalParams(conv(channels, half, "theta"), conv(channels, half, "phi"),
                          conv(channels, half, "g"), conv(half, channels, "out"))


def nonlocal_forward(feat: np.ndarray, nl: NonLocalParams) -> np.ndarray:
    """H = F + out(attention @ g(F)) with attention = row-softmax(theta^T phi).

    Attention couples every pair of the N = h*w positions, so cost grows as
    N^2; this is the fully-connected reference the sampled layer is compared
    against.
    """
    n, c, h, w = feat.shape
    npos = h * w
    half = nl.theta.c_out
    th = conv2d(feat, nl.theta).reshape(n, half, npos)
    ph = conv2d(feat, nl.phi).reshape(n, half, npos)
    gv = conv2d(feat, nl.g).reshape(n, half, npos)
    scores = np.einsum("nci,ncj->nij", th, ph, optimize=True)  # (n, N, N)
    attn = softmax_lastk(scores, axis=2)
    agg = np.einsum("nij,ncj->nci", attn, gv, optimize=True).reshape(n, half, h, w)
    return feat + conv2d(agg, nl.out)


def nonlocal_attention(feat: np.ndarray, nl: NonLocalParams) -> np.ndarray:
    """The (n, N, N) row-stochastic attention matrix, for tests."""
    n, c, h, w = feat.shape
    npos = h * w
    th = conv2d(feat, nl.theta).reshape(n, -1, npos)
    ph = conv2d(feat, nl.phi).reshape(n, -1, npos)
    return softmax_lastk(np.einsum("nci,ncj->nij", th, ph), axis=2)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

REL_ERR_FLOOR = 1e-8


class GradCheckRow:
    def __init__(self, name, max_abs_err, max_rel_err, argmax_index):
        self.name = name
        self.max_abs_err = float(max_abs_err)
        self.max_rel_err = float(max_rel_err)
        self.argmax_index = tuple(int(i) for i in argmax_index)


class GradCheckReport:
    """Per-tensor comparison of analytic vs central-difference gradients."""

    def __init__(self, rows, eps, threshold):
        self.rows = list(rows)
        self.eps = float(eps)
        self.threshold = float(threshold)

    @property
    def passed(self) -> bool:
        return all(r.max_rel_err < self.threshold for r in self.rows)

    @property
    def worst(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    def to_json_dict(self) -> dict:
        return {
            "eps": self.eps,
            "threshold": self.threshold,
            "passed": self.passed,
            "max_rel_err": self.worst,
            "rows": [
                {"name": r.name, "max_abs_err": r.max_abs_err,
                 "max_rel_err": r.max_rel_err, "argmax_index": list(r.argmax_index)}
                for r in self.rows
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GradCheckReport":
        rows = [GradCheckRow(r["name"], r["max_abs_err"], r["max_rel_err"],
                             r["argmax_index"]) for r in d["rows"]]
        return cls(rows, d["eps"], d["threshold"])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "max_abs_err", "max_rel_err", "argmax_index"])
        for r in self.rows:
            writer.writerow([r.name, repr(r.max_abs_err), repr(r.max_rel_err),
                             " ".join(str(i) for i in r.argmax_index)])
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text: str, eps: float, threshold: float) -> "GradCheckReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            idx = tuple(int(t) for t in rec["argmax_index"].split()) \
                if rec["argmax_index"] else ()
            rows.append(GradCheckRow(rec["name"], float(rec["max_abs_err"]),
                                     float(rec["max_rel_err"]), idx))
        return cls(rows, eps, threshold)


def finite_diff_grad(f, point: dict, analytic: dict, eps: float = 1e-5,
                     threshold: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of a scalar function against central differences.

    f maps a dict of named float64 arrays to a float; point holds the arrays
    (not mutated); analytic holds the gradients under test, keyed identically.
    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ConfigError(f"finite_diff_grad: eps must be positive, got {eps}")
    work = {name: np.array(arr, dtype=np.float64) for name, arr in point.items()}
    rows = []
    for name in point:
        if name not in analytic:
            raise UsageError(f"finite_diff_grad: no analytic gradient for {name!r}")
        arr = work[name]
        ana = np.asarray(analytic[name], dtype=np.float64)
        if ana.shape != arr.shape:
            raise UsageError(f"analytic gradient for {name!r} has shape {ana.shape}, "
                             f"tensor has {arr.shape}")
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(work)
            flat[i] = orig - eps
            fm = f(work)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                idx = tuple(int(v) for v in np.unravel_index(i, arr.shape)) \
                    if arr.shape else ()
                raise UsageError(
                    f"finite_diff_grad: non-finite evaluation at {name}[{idx}]")
            nflat[i] = (fp - fm) / (2.0 * eps)
        abs_err = np.abs(ana - num)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), REL_ERR_FLOOR)
        rel_err = abs_err / denom
        if rel_err.size:
            worst = int(np.argmax(rel_err))
            idx = np.unravel_index(worst, arr.shape) if arr.shape else ()
            rows.append(GradCheckRow(name, abs_err.max(), rel_err.max(), idx))
        else:
            rows.append(GradCheckRow(name, 0.0, 0.0, ()))
    return GradCheckReport(rows, eps, threshold)


def layer_gradcheck(cfg, seed: int, batch: int = 1, height: int = 6, width: int = 6,
                    eps: float = 1e-5, threshold: float = 1e-5):
    """Finite-difference check of the full layer against its hand-derived backward.

    The scalar under test is <R, H> for a fixed random R. The layer uses
    fully randomized parameters; seeds whose sampled coordinates fall within
    1e-3 of the integer lattice (bilinear kinks) or whose pre-nonlinearity
    values sit within 1e-4 of zero (relu kink) are skipped deterministically.
    Returns (report, seed_used).
    """
    from .layer import (dgmn_backward, dgmn_forward, named_params,
                        params_from_named, randomize_params)

    for attempt in range(64):
        seed_used = seed + attempt
        params = randomize_params(cfg, seed_used)
        feat = rng_fill((batch, cfg.channels, height, width),
                        derive_seed(seed_used, "gradcheck-input"), "normal")
        # Probe scale 1e-4 keeps finite-difference roundoff (~ |f| * eps_mach
        # / eps) below threshold * rel-err floor, so gradient components that
        # are indistinguishable from zero at FD precision cannot fail the
        # relative test on measurement noise alone.
        probe = 1e-4 * rng_fill(feat.shape, derive_seed(seed_used, "gradcheck-probe"),
                                "normal")
        hidden, cache = dgmn_forward(feat, params, cfg)
        # Margins: eps = 1e-5 perturbations move coordinates and
        # pre-nonlinearity values by O(eps); 1e-4 keeps evaluations on one
        # smooth piece of the bilinear kernel / relu. Without walk sampling
        # the coordinates are fixed integers and never move, so no margin
        # is needed there.
        coord_margin = min(
            float(np.min(np.abs(rc.coords - np.round(rc.coords))))
            for rc in cache.rate_caches) if cfg.enable_ds else np.inf
        relu_margin = float(np.min(np.abs(cache.u))) if cfg.nonlinearity == "relu" \
            else np.inf
        if coord_margin >= 1e-4 and relu_margin >= 1e-4:
            break
    else:
        raise UsageError("layer_gradcheck: no kink-free seed found in 64 attempts")

    grad_feat, grads = dgmn_backward(probe, cache)
    point = dict(named_params(params))
    point["input"] = feat
    analytic = dict(grads)
    analytic["input"] = grad_feat
    holder = {}

    def objective(tensors):
        # The checker perturbs the arrays in place, so wrap them once.
        if "params" not in holder:
            holder["params"] = params_from_named(cfg, tensors)
        out, _ = dgmn_forward(tensors["input"], holder["params"], cfg)
        return float(np.sum(probe * out))

    return finite_diff_grad(objective, point, analytic, eps, threshold), seed_used


def dmc_equivalence_errors(seed: int, cases: int = 100) -> list:
    """Max |vectorized - naive| message aggregation error per random case."""
    from .layer import dmc
    from .dynamics import DynamicField
    from .sampler import RateGrid, bilinear_gather, sample_field
    from .tensor import softmax_lastk as _softmax

    if cases < 1:
        raise ConfigError(f"dmc_equivalence_errors: need >= 1 case, got {cases}")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed & (2**64 - 1))))
    errors = []
    for case in range(cases):
        h = int(rng.integers(3, 8))
        w = int(rng.integers(3, 8))
        groups = int(rng.choice([1, 2, 4]))
        c = groups * int(rng.integers(1, 3 if groups == 4 else 5))
        n = int(rng.integers(1, 3))
        rate = int(rng.integers(1, 4))
        value = rng.normal(size=(n, c, h, w))
        grid = RateGrid(rate, 3)
        walks = rng.uniform(-3.0, 3.0, size=(n, 2 * grid.taps, h, w))
        coords = sample_field(grid, n, h, w, walks)
        raw_aff = rng.normal(size=(n, grid.taps, h, w))
        affinities = _softmax(raw_aff, axis=1) if case % 2 == 0 else raw_aff
        if case % 3 == 0:
            weights = rng.normal(size=(grid.taps, groups))  # shared static table
        else:
            weights = rng.normal(size=(n, grid.taps, groups, h, w))
        fast = dmc(value, bilinear_gather(value, coords),
                   DynamicField(weights, affinities))
        slow = naive_dmc(value, coords, affinities, weights, groups)
        errors.append(float(np.max(np.abs(fast - slow))))
    return errors


def write_gradcheck_json(report: GradCheckReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_gradcheck_json(path) -> GradCheckReport:
    with open(path) as fh:
        return GradCheckReport.from_json_dict(json.load(fh))
