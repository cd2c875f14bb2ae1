"""Dense rank-4 tensor substrate.

Values are plain numpy float64 arrays of shape (n, c, h, w), row-major.
Everything in this package runs in 64-bit; a 32-bit cast exists only for
timing runs in the benchmark command. Every operation here is pure and
comes with a hand-derived backward rule (`*_backward`) that is checked
against central finite differences in the test suite.

Random fills use numpy's Philox counter-based generator
(philox4x64, keyed directly with the user seed), so a seed fully
determines every generated tensor across runs and platforms.

Binary tensor format "DGT1": magic b"DGT1", then uint32-LE rank (always 4),
four uint32-LE dims (n, c, h, w), then n*c*h*w IEEE-754 LE float64 values
in row-major order.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"DGT1"
_MASK64 = (1 << 64) - 1


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    """Validate that x is a rank-4 float64 array and return it as such."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ConfigError(f"{name}: expected rank-4 (n, c, h, w), got shape {arr.shape}")
    return arr


def _check_same_shape(x: np.ndarray, y: np.ndarray, op: str) -> None:
    if x.shape != y.shape:
        raise ConfigError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


# ---------------------------------------------------------------------------
# Seeded RNG
# ---------------------------------------------------------------------------

def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & _MASK64)))


def derive_seed(seed: int, label: str) -> int:
    """Stable per-field sub-seed: hash of (seed, label), independent of PYTHONHASHSEED."""
    digest = hashlib.blake2s(
        label.encode("utf-8") + struct.pack("<Q", seed & _MASK64)
    ).digest()
    return int.from_bytes(digest[:8], "little")


def rng_fill(
    shape,
    seed: int,
    dist: str = "zeros",
    *,
    low: float = 0.0,
    high: float = 1.0,
    mean: float = 0.0,
    std: float = 1.0,
) -> np.ndarray:
    """Deterministically fill a tensor of the given shape.

    dist is one of "zeros", "uniform" (bounds [low, high)) or "normal"
    (mean/std). Identical (shape, seed, dist, params) always produce an
    identical tensor.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ConfigError(f"rng_fill: negative dimension in shape {shape}")
    if dist == "zeros":
        return np.zeros(shape, dtype=np.float64)
    if dist == "uniform":
        if high < low:
            raise ConfigError(f"rng_fill: uniform upper bound {high} < lower bound {low}")
        return _generator(seed).uniform(low, high, size=shape)
    if dist == "normal":
        if std < 0:
            raise ConfigError(f"rng_fill: negative normal std {std}")
        return _generator(seed).normal(mean, std, size=shape)
    raise ConfigError(f"rng_fill: unknown distribution {dist!r}")


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # Subgradient 0 at x == 0.
    return grad_out * (x > 0.0)


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_same_shape(x, y, "add")
    return x + y


def mul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_same_shape(x, y, "mul")
    return x * y


def scale(x: np.ndarray, a: float) -> np.ndarray:
    return x * float(a)


def reduce_sum(x: np.ndarray) -> float:
    return float(np.sum(x))


def softmax_lastk(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """Softmax over the tap axis, computed with max subtraction per site."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_lastk_backward(y: np.ndarray, grad_out: np.ndarray, axis: int = 1) -> np.ndarray:
    """Backward rule given the forward output y = softmax(x)."""
    inner = np.sum(grad_out * y, axis=axis, keepdims=True)
    return y * (grad_out - inner)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

class Conv2dParams:
    """Parameters of a same-padded, dilated, grouped 2-D convolution.

    weight: (c_out, c_in // groups, k, k), bias: (c_out,). Padding is always
    "same" with zeros, so spatial dims are preserved. Output channel o in
    group g = o // (c_out // groups) reads only input channels of group g.
    """

    def __init__(self, weight, bias, dilation: int = 1, groups: int = 1):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.dilation = int(dilation)
        self.groups = int(groups)
        if self.weight.ndim != 4:
            raise ConfigError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        if self.weight.shape[2] != self.weight.shape[3]:
            raise ConfigError(f"conv kernel must be square, got {self.weight.shape[2:]}")
        if self.k % 2 == 0:
            raise ConfigError(f"conv kernel side must be odd, got {self.k}")
        if self.bias.shape != (self.c_out,):
            raise ConfigError(
                f"conv bias shape {self.bias.shape} does not match c_out {self.c_out}"
            )
        if self.dilation < 1:
            raise ConfigError(f"conv dilation must be >= 1, got {self.dilation}")
        if self.groups < 1 or self.c_out % self.groups != 0:
            raise ConfigError(f"c_out {self.c_out} not divisible by groups {self.groups}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def copy(self) -> "Conv2dParams":
        return Conv2dParams(self.weight.copy(), self.bias.copy(), self.dilation, self.groups)


def init_conv(
    c_in: int,
    c_out: int,
    k: int = 1,
    *,
    dilation: int = 1,
    groups: int = 1,
    seed: int = 0,
    dist: str = "zeros",
    std: float = 0.0,
) -> Conv2dParams:
    """Build a Conv2dParams with zero bias and the requested weight fill."""
    shape = (c_out, c_in // groups, k, k)
    if dist == "normal":
        weight = rng_fill(shape, seed, "normal", std=std)
    elif dist == "zeros":
        weight = np.zeros(shape)
    elif dist == "identity":
        if c_in != c_out or k != 1 or groups != 1:
            raise ConfigError("identity init requires a square 1x1 ungrouped conv")
        weight = np.eye(c_out).reshape(c_out, c_in, 1, 1)
    else:
        raise ConfigError(f"init_conv: unknown init {dist!r}")
    return Conv2dParams(weight, np.zeros(c_out), dilation=dilation, groups=groups)


def _patches(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    """im2col view materialized as (n, c, k*k, h, w), zero same-padding."""
    n, c, h, w = x.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k * k, h, w), dtype=np.float64)
    for u in range(k):
        for v in range(k):
            cols[:, :, u * k + v] = xp[
                :, :, u * dilation : u * dilation + h, v * dilation : v * dilation + w
            ]
    return cols


def _group_cols(x: np.ndarray, p: Conv2dParams) -> np.ndarray:
    """Patches rearranged for batched matmul: (groups, cin_g*k*k, n*h*w)."""
    n, c, h, w = x.shape
    g = p.groups
    cin_g = p.c_in // g
    cols = _patches(x, p.k, p.dilation).reshape(n, g, cin_g * p.k * p.k, h * w)
    return np.ascontiguousarray(cols.transpose(1, 2, 0, 3)).reshape(
        g, cin_g * p.k * p.k, n * h * w)


def conv2d(x: np.ndarray, p: Conv2dParams) -> np.ndarray:
    """Same-padded dilated grouped convolution. Output (n, c_out, h, w)."""
    x = as_tensor4(x, "conv input")
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ConfigError(f"conv2d: input has {c} channels, params expect {p.c_in}")
    if p.c_in % p.groups != 0:
        raise ConfigError(f"conv2d: c_in {p.c_in} not divisible by groups {p.groups}")
    g = p.groups
    cout_g = p.c_out // g
    cols = _group_cols(x, p)                                   # (g, ciK, nhw)
    wg = p.weight.reshape(g, cout_g, -1)                       # (g, cout_g, ciK)
    y = np.matmul(wg, cols)                                    # (g, cout_g, nhw)
    y = y.reshape(g, cout_g, n, h, w).transpose(2, 0, 1, 3, 4)
    return y.reshape(n, p.c_out, h, w) + p.bias[None, :, None, None]


def conv2d_backward(x: np.ndarray, p: Conv2dParams, grad_out: np.ndarray):
    """Adjoints of conv2d: returns (grad_x, grad_weight, grad_bias)."""
    n, c, h, w = x.shape
    g = p.groups
    cin_g = p.c_in // g
    cout_g = p.c_out // g
    k = p.k
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    gy = np.ascontiguousarray(
        grad_out.reshape(n, g, cout_g, h * w).transpose(1, 2, 0, 3)).reshape(
        g, cout_g, n * h * w)
    cols = _group_cols(x, p)
    grad_weight = np.matmul(gy, cols.transpose(0, 2, 1)).reshape(
        p.c_out, cin_g, k, k)
    # Scatter grad through the patch extraction (transpose of the gather above).
    wg = p.weight.reshape(g, cout_g, -1)
    gcols = np.matmul(wg.transpose(0, 2, 1), gy)               # (g, ciK, nhw)
    gcols = gcols.reshape(g, cin_g, k * k, n, h, w).transpose(3, 0, 1, 2, 4, 5)
    gcols = gcols.reshape(n, p.c_in, k * k, h, w)
    pad = p.dilation * (k - 1) // 2
    gxp = np.zeros((n, p.c_in, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    d = p.dilation
    for u in range(k):
        for v in range(k):
            gxp[:, :, u * d : u * d + h, v * d : v * d + w] += gcols[:, :, u * k + v]
    grad_x = gxp[:, :, pad : pad + h, pad : pad + w]
    return grad_x, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def tensor_write(x: np.ndarray, path) -> None:
    """Write a rank-4 tensor in the DGT1 binary format."""
    x = as_tensor4(x, "tensor_write input")
    if not np.all(np.isfinite(x)):
        raise ConfigError("tensor_write: refusing to serialize non-finite values")
    header = MAGIC + struct.pack("<5I", 4, *x.shape)
    payload = np.ascontiguousarray(x, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def tensor_read(path) -> np.ndarray:
    """Read a DGT1 file back into an (n, c, h, w) float64 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"bad magic bytes at byte offset 0: expected {MAGIC!r}")
    if len(blob) < 8:
        raise FormatError(f"truncated header: file ends at byte offset {len(blob)}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank != 4:
        raise FormatError(f"unsupported rank {rank} at byte offset 4 (expected 4)")
    if len(blob) < 24:
        raise FormatError(f"truncated dims: file ends at byte offset {len(blob)}")
    dims = struct.unpack_from("<4I", blob, 8)
    count = int(np.prod([int(d) for d in dims], dtype=np.int64))
    expected = 24 + 8 * count
    if len(blob) < expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes "
            f"({count} float64 values), file ends at byte offset {len(blob)}"
        )
    if len(blob) > expected:
        raise FormatError(f"trailing garbage at byte offset {expected}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=24).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"non-finite payload value at element {i} (byte offset {24 + 8 * i})")
    return data.reshape(dims)
