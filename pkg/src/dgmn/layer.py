"""The dynamic message passing layer.

Forward pass, per sampling rate q:
  1. lay a dilated K-tap grid around every position (rate rho_q),
  2. if walk sampling is enabled, predict fractional per-tap walks from the
     feature map and add them to the grid,
  3. bilinearly gather the value-transformed features at the resulting
     coordinates,
  4. predict per-position grouped filter weights and tap affinities
     (uniform affinities / a shared static table when the respective
     dynamic property is disabled),
  5. aggregate the message: M_q[p, c] = sum_j A[p, j] * w[p, j, g(c)] *
     gathered[j, c, p], with channel group g(c) = floor(c * G / C).

The refined map is H = sigma(F + alpha * output_transform(sum_q beta_q M_q)).
With alpha = 0 and zero walk predictors (the initialization used here) the
layer is exactly sigma(F), so it can be inserted anywhere without perturbing
a pretrained stack.

The backward pass is hand-derived end to end, including the coordinate
derivative of the bilinear gather that carries gradient into the walk
predictors. Gradients are returned keyed by the names of `named_params`.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ConfigError, FormatError, UsageError
from . import tensor as T
from .tensor import Conv2dParams, conv2d, conv2d_backward, derive_seed, init_conv
from .sampler import RateGrid, bilinear_gather, bilinear_gather_backward, \
    predict_walks, sample_field, walks_backward
from .dynamics import DynamicField, dyn_out_channels, merge_dynamic_grads, \
    normalize_affinity, normalize_affinity_backward, predict_dynamic


class DgmnConfig:
    """Layer hyperparameters.

    channels: feature width C (divisible by groups); rates: the S sampling
    rates; kernel_size: tap grid side k (K = k*k taps); groups: channel
    groups G sharing a filter scalar; enable_da / enable_dw / enable_ds
    switch the dynamic affinity, dynamic weight and walk sampling properties;
    nonlinearity: "relu" or "identity".
    """

    def __init__(self, channels: int, rates=(1,), kernel_size: int = 3,
                 groups: int = 4, enable_da: bool = True, enable_dw: bool = True,
                 enable_ds: bool = True, nonlinearity: str = "relu"):
        self.channels = int(channels)
        self.rates = tuple(int(r) for r in rates)
        self.kernel_size = int(kernel_size)
        self.groups = int(groups)
        self.enable_da = bool(enable_da)
        self.enable_dw = bool(enable_dw)
        self.enable_ds = bool(enable_ds)
        self.nonlinearity = nonlinearity
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.groups < 1 or self.channels % self.groups != 0:
            raise ConfigError(
                f"channels {self.channels} not divisible by groups {self.groups}")
        if not self.rates:
            raise ConfigError("at least one sampling rate is required")
        if any(r < 1 for r in self.rates):
            raise ConfigError(f"sampling rates must be >= 1, got {self.rates}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if not self.enable_dw and not self.enable_da:
            raise ConfigError("enable_da must be on when enable_dw is off")
        if nonlinearity not in ("relu", "identity"):
            raise ConfigError(f"unknown nonlinearity {nonlinearity!r}")

    @property
    def taps(self) -> int:
        return self.kernel_size * self.kernel_size

    @property
    def num_rates(self) -> int:
        return len(self.rates)

    def to_dict(self) -> dict:
        return {
            "channels": self.channels, "rates": list(self.rates),
            "kernel_size": self.kernel_size, "groups": self.groups,
            "enable_da": self.enable_da, "enable_dw": self.enable_dw,
            "enable_ds": self.enable_ds, "nonlinearity": self.nonlinearity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DgmnConfig":
        return cls(**d)


class DgmnParams:
    """All learnable state of one layer. See init_params for the layout."""

    def __init__(self, value_transform, output_transform, dyn_convs, walk_convs,
                 static_weights, betas, alpha):
        self.value_transform = value_transform      # 1x1 conv C -> C
        self.output_transform = output_transform    # 1x1 conv C -> C
        self.dyn_convs = list(dyn_convs)            # per rate, 3x3 dilated
        self.walk_convs = list(walk_convs) if walk_convs is not None else None
        self.static_weights = static_weights        # (K, G) when dw is off
        self.betas = np.asarray(betas, dtype=np.float64)   # (S,) message scales
        self.alpha = np.asarray(alpha, dtype=np.float64)   # scalar residual scale


def init_params(cfg: DgmnConfig, seed: int = 0) -> DgmnParams:
    """Initialize so the layer is the identity (alpha = 0, zero walks).

    Value/output transforms start at identity; dynamic predictors start at
    normal(0, 0.01) weights with zero bias, giving near-uniform affinities
    and near-zero dynamic weights; walk predictors start at exactly zero so
    walk sampling initially coincides with the uniform grid.
    """
    C, K, G = cfg.channels, cfg.taps, cfg.groups
    value = init_conv(C, C, 1, dist="identity")
    output = init_conv(C, C, 1, dist="identity")
    dyn_convs = []
    for q, rate in enumerate(cfg.rates):
        c_out = dyn_out_channels(K, G, cfg.enable_dw, cfg.enable_da)
        dyn_convs.append(init_conv(
            C, c_out, cfg.kernel_size, dilation=rate,
            seed=derive_seed(seed, f"dyn{q}"), dist="normal", std=0.01))
    walk_convs = None
    if cfg.enable_ds:
        walk_convs = [init_conv(C, 2 * K, cfg.kernel_size, dilation=rate)
                      for rate in cfg.rates]
    static = None if cfg.enable_dw else np.ones((K, G))
    return DgmnParams(value, output, dyn_convs, walk_convs, static,
                      np.ones(cfg.num_rates), np.zeros(()))


def randomize_params(cfg: DgmnConfig, seed: int = 0, scale: float = 0.3,
                     walk_scale: float = 0.08) -> DgmnParams:
    """Fully random parameters (for gradient checks and benchmarks).

    Unlike init_params nothing is zero here, so every gradient path is
    exercised; walk predictor weights are kept small so sampled coordinates
    stay within a few pixels of the grid.
    """
    params = init_params(cfg, seed)

    def fill(arr, label, s):
        arr[...] = T.rng_fill(arr.shape if arr.shape else (1,),
                              derive_seed(seed, label), "normal", std=s).reshape(arr.shape)

    for name, arr in named_params(params).items():
        s = walk_scale if name.startswith("walk_conv") else scale
        fill(arr, name, s)
    return params


def named_params(params: DgmnParams) -> dict:
    """Flat name -> array view of every learnable tensor."""
    out = {
        "value_transform.weight": params.value_transform.weight,
        "value_transform.bias": params.value_transform.bias,
        "output_transform.weight": params.output_transform.weight,
        "output_transform.bias": params.output_transform.bias,
    }
    for q, conv in enumerate(params.dyn_convs):
        out[f"dyn_conv{q}.weight"] = conv.weight
        out[f"dyn_conv{q}.bias"] = conv.bias
    if params.walk_convs is not None:
        for q, conv in enumerate(params.walk_convs):
            out[f"walk_conv{q}.weight"] = conv.weight
            out[f"walk_conv{q}.bias"] = conv.bias
    if params.static_weights is not None:
        out["static_weights"] = params.static_weights
    out["betas"] = params.betas
    out["alpha"] = params.alpha
    return out


def num_scalars(params: DgmnParams) -> int:
    return sum(int(np.size(v)) for v in named_params(params).values())


def params_from_named(cfg: DgmnConfig, tensors: dict) -> DgmnParams:
    """Rebuild a DgmnParams view over a named-tensor dict (arrays are aliased)."""

    def conv(prefix, dilation):
        return Conv2dParams(tensors[prefix + ".weight"], tensors[prefix + ".bias"],
                            dilation=dilation)

    dyn = [conv(f"dyn_conv{q}", cfg.rates[q]) for q in range(cfg.num_rates)]
    walks = None
    if cfg.enable_ds:
        walks = [conv(f"walk_conv{q}", cfg.rates[q]) for q in range(cfg.num_rates)]
    static = None if cfg.enable_dw else tensors["static_weights"]
    return DgmnParams(conv("value_transform", 1), conv("output_transform", 1),
                      dyn, walks, static, tensors["betas"], tensors["alpha"])


def validate_params(cfg: DgmnConfig, params: DgmnParams) -> None:
    C, K, G = cfg.channels, cfg.taps, cfg.groups
    for name, conv, c_out, k in (
        ("value_transform", params.value_transform, C, 1),
        ("output_transform", params.output_transform, C, 1),
    ):
        if conv.c_in != C or conv.c_out != c_out or conv.k != k:
            raise ConfigError(f"{name} has shape {conv.weight.shape}, config wants "
                              f"{c_out}x{C}x{k}x{k}")
    if len(params.dyn_convs) != cfg.num_rates:
        raise ConfigError(f"{len(params.dyn_convs)} dynamic predictors for "
                          f"{cfg.num_rates} rates")
    want = dyn_out_channels(K, G, cfg.enable_dw, cfg.enable_da)
    for q, conv in enumerate(params.dyn_convs):
        if conv.c_in != C or conv.c_out != want or conv.dilation != cfg.rates[q]:
            raise ConfigError(f"dyn_conv{q} mismatches config (c_out {conv.c_out} "
                              f"vs {want}, dilation {conv.dilation} vs {cfg.rates[q]})")
    if cfg.enable_ds:
        if params.walk_convs is None or len(params.walk_convs) != cfg.num_rates:
            raise ConfigError("walk predictors missing for a walk-sampling config")
        for q, conv in enumerate(params.walk_convs):
            if conv.c_in != C or conv.c_out != 2 * K or conv.dilation != cfg.rates[q]:
                raise ConfigError(f"walk_conv{q} mismatches config")
    elif params.walk_convs is not None:
        raise ConfigError("walk predictors present but walk sampling is disabled")
    if cfg.enable_dw:
        if params.static_weights is not None:
            raise ConfigError("static weight table present but dynamic weights enabled")
    else:
        if params.static_weights is None or params.static_weights.shape != (K, G):
            raise ConfigError(f"static weight table must be ({K}, {G})")
    if params.betas.shape != (cfg.num_rates,):
        raise ConfigError(f"betas shape {params.betas.shape} != ({cfg.num_rates},)")
    if params.alpha.shape != ():
        raise ConfigError("alpha must be a scalar")


# ---------------------------------------------------------------------------
# Message calculation and update
# ---------------------------------------------------------------------------

def dmc(value_map: np.ndarray, gathered: np.ndarray, dyn: DynamicField) -> np.ndarray:
    """Aggregate gathered taps into a message map (n, C, h, w).

    M[p, c] = sum_j affinity[p, j] * weight[p, j, g(c)] * gathered[j, c, p],
    where weight is either the per-position field (n, K, G, h, w) or a shared
    (K, G) table broadcast over positions.
    """
    n, c, h, w = value_map.shape
    if gathered.shape[0] != n or gathered.shape[2] != c or gathered.shape[3:] != (h, w):
        raise ConfigError(f"gathered shape {gathered.shape} mismatches value map "
                          f"{value_map.shape}")
    K = gathered.shape[1]
    a = dyn.affinities
    wt = dyn.weights
    if a.shape != (n, K, h, w):
        raise ConfigError(f"affinity shape {a.shape} != {(n, K, h, w)}")
    G = wt.shape[-3] if wt.ndim == 5 else wt.shape[-1]
    if c % G != 0:
        raise ConfigError(f"channels {c} not divisible by weight groups {G}")
    m = c // G
    gt = gathered.reshape(n, K, G, m, h, w)
    if wt.ndim == 5:   # dynamic per-position weights
        aw = a[:, :, None] * wt
    elif wt.ndim == 2:  # shared static table
        aw = a[:, :, None] * wt[None, :, :, None, None]
    else:
        raise ConfigError(f"weights must be (n,K,G,h,w) or (K,G), got {wt.shape}")
    out = (aw[:, :, :, None] * gt).sum(axis=1)  # (n, G, m, h, w)
    return out.reshape(n, c, h, w)


def dmc_backward(gathered: np.ndarray, dyn: DynamicField, grad_msg: np.ndarray):
    """Adjoints of dmc: (grad_affinity, grad_weights, grad_gathered)."""
    n, K = gathered.shape[:2]
    c = gathered.shape[2]
    h, w = gathered.shape[3:]
    a, wt = dyn.affinities, dyn.weights
    G = wt.shape[-3] if wt.ndim == 5 else wt.shape[-1]
    m = c // G
    gt = gathered.reshape(n, K, G, m, h, w)
    gm = grad_msg.reshape(n, 1, G, m, h, w)
    inner = (gt * gm).sum(axis=3)                 # (n, K, G, h, w)
    if wt.ndim == 5:
        ga = (inner * wt).sum(axis=2)
        gw = inner * a[:, :, None]
        aw = a[:, :, None] * wt
    else:
        ga = (inner * wt[None, :, :, None, None]).sum(axis=2)
        gw = (inner * a[:, :, None]).sum(axis=(0, 3, 4))
        aw = a[:, :, None] * wt[None, :, :, None, None]
    gg = aw[:, :, :, None] * gm
    return ga, gw, gg.reshape(n, K, c, h, w)


def combine_update(feat, messages, betas, alpha, output_transform, nonlinearity):
    """H = sigma(F + alpha * output_transform(sum_q beta_q * M_q))."""
    z = np.zeros_like(feat)
    for beta, msg in zip(np.atleast_1d(betas), messages):
        if msg.shape != feat.shape:
            raise ConfigError(f"message shape {msg.shape} != feature shape {feat.shape}")
        z += float(beta) * msg
    o = conv2d(z, output_transform)
    u = feat + float(alpha) * o
    if nonlinearity == "relu":
        return T.relu(u), (z, o, u)
    if nonlinearity == "identity":
        return u, (z, o, u)
    raise ConfigError(f"unknown nonlinearity {nonlinearity!r}")


# ---------------------------------------------------------------------------
# Full layer
# ---------------------------------------------------------------------------

class _RateCache:
    __slots__ = ("grid", "walks", "coords", "gathered", "raw_weights", "logits",
                 "dyn", "message")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


class DgmnCache:
    """Everything the backward pass needs from one forward evaluation."""

    def __init__(self, cfg, params, feat, value, rate_caches, z, o, u):
        self.cfg = cfg
        self.params = params
        self.feat = feat
        self.value = value
        self.rate_caches = rate_caches
        self.z = z
        self.o = o
        self.u = u


def dgmn_forward(feat: np.ndarray, params: DgmnParams, cfg: DgmnConfig):
    """Run one message passing update. Returns (H, cache)."""
    feat = T.as_tensor4(feat, "layer input")
    n, c, h, w = feat.shape
    if c != cfg.channels:
        raise ConfigError(f"input has {c} channels, config expects {cfg.channels}")
    validate_params(cfg, params)
    K, G = cfg.taps, cfg.groups
    value = conv2d(feat, params.value_transform)
    rate_caches = []
    messages = []
    for q, rate in enumerate(cfg.rates):
        grid = RateGrid(rate, cfg.kernel_size)
        walks = None
        if cfg.enable_ds:
            walks = predict_walks(feat, params.walk_convs[q], grid)
        coords = sample_field(grid, n, h, w, walks)
        gathered = bilinear_gather(value, coords)
        raw_w, logits = predict_dynamic(feat, params.dyn_convs[q], K, G,
                                        cfg.enable_dw, cfg.enable_da)
        if cfg.enable_da:
            affinities = normalize_affinity(logits)
        else:
            affinities = np.full((n, K, h, w), 1.0 / K)
        weights = raw_w if cfg.enable_dw else params.static_weights
        dyn = DynamicField(weights, affinities)
        msg = dmc(value, gathered, dyn)
        rate_caches.append(_RateCache(grid=grid, walks=walks, coords=coords,
                                      gathered=gathered, raw_weights=raw_w,
                                      logits=logits, dyn=dyn, message=msg))
        messages.append(msg)
    out, (z, o, u) = combine_update(feat, messages, params.betas, params.alpha,
                                    params.output_transform, cfg.nonlinearity)
    return out, DgmnCache(cfg, params, feat, value, rate_caches, z, o, u)


def dgmn_backward(grad_out: np.ndarray, cache: DgmnCache):
    """Reverse-mode gradients of <grad_out, H> w.r.t. the input and all params.

    Returns (grad_feat, grads) with grads keyed like named_params.
    """
    if cache is None or not isinstance(cache, DgmnCache):
        raise UsageError("dgmn_backward needs the cache returned by dgmn_forward")
    cfg, params = cache.cfg, cache.params
    feat = cache.feat
    if grad_out.shape != feat.shape:
        raise UsageError(f"grad shape {grad_out.shape} does not match the cached "
                         f"forward (input {feat.shape}); stale cache?")
    grads = {name: np.zeros_like(arr) for name, arr in named_params(params).items()}

    if cfg.nonlinearity == "relu":
        gu = T.relu_backward(cache.u, grad_out)
    else:
        gu = grad_out
    grad_feat = gu.copy()
    grads["alpha"] += np.sum(gu * cache.o)
    go = float(params.alpha) * gu
    gz, gow, gob = conv2d_backward(cache.z, params.output_transform, go)
    grads["output_transform.weight"] += gow
    grads["output_transform.bias"] += gob

    grad_value = np.zeros_like(cache.value)
    for q, rc in enumerate(cache.rate_caches):
        grads["betas"][q] += np.sum(gz * rc.message)
        gmsg = float(params.betas[q]) * gz
        ga, gw, gg = dmc_backward(rc.gathered, rc.dyn, gmsg)
        # affinity half of the joint predictor
        grad_logits = None
        if cfg.enable_da:
            grad_logits = normalize_affinity_backward(rc.dyn.affinities, ga)
        # filter half: dynamic -> predictor, static -> shared table
        grad_raw_w = None
        if cfg.enable_dw:
            grad_raw_w = gw
        else:
            grads["static_weights"] += gw
        if grad_raw_w is not None or grad_logits is not None:
            gdyn_out = merge_dynamic_grads(grad_raw_w, grad_logits)
            gf, gdw, gdb = conv2d_backward(feat, params.dyn_convs[q], gdyn_out)
            grad_feat += gf
            grads[f"dyn_conv{q}.weight"] += gdw
            grads[f"dyn_conv{q}.bias"] += gdb
        # gather: into the value map and, through the coordinates, the walks
        gv, gcoords = bilinear_gather_backward(cache.value, rc.coords, gg)
        grad_value += gv
        if cfg.enable_ds:
            gf, gww, gwb = walks_backward(feat, params.walk_convs[q], gcoords)
            grad_feat += gf
            grads[f"walk_conv{q}.weight"] += gww
            grads[f"walk_conv{q}.bias"] += gwb
    gf, gvw, gvb = conv2d_backward(feat, params.value_transform, grad_value)
    grad_feat += gf
    grads["value_transform.weight"] += gvw
    grads["value_transform.bias"] += gvb
    return grad_feat, grads


# ---------------------------------------------------------------------------
# Parameter bundle serialization
# ---------------------------------------------------------------------------
# A bundle is a directory: manifest.json plus one DGT1 file per tensor.
# The manifest names every field, its logical shape, and the layer config;
# tensors of rank < 4 are stored padded with leading unit dims.

BUNDLE_FORMAT = "dgmn-params"


def _pad4(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    return (1,) * (4 - len(shape)) + shape


def save_bundle(dirpath, tensors: dict, meta: dict) -> None:
    """Write named tensors as DGT1 files plus a manifest carrying `meta`."""
    os.makedirs(dirpath, exist_ok=True)
    manifest = {"format": BUNDLE_FORMAT, "version": 1, **meta, "tensors": {}}
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        fname = name.replace(".", "_") + ".dgt"
        T.tensor_write(arr.reshape(_pad4(arr.shape)), os.path.join(dirpath, fname))
        manifest["tensors"][name] = {"file": fname, "shape": list(arr.shape)}
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_params(dirpath, params: DgmnParams, cfg: DgmnConfig,
                extra_tensors: dict | None = None,
                extra_meta: dict | None = None) -> None:
    tensors = dict(named_params(params))
    if extra_tensors:
        tensors.update(extra_tensors)
    meta = {"config": cfg.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    save_bundle(dirpath, tensors, meta)


def load_bundle(dirpath):
    """Read a bundle directory: returns (manifest dict, name -> array)."""
    mpath = os.path.join(dirpath, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"no manifest.json in {dirpath}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc}")
    if manifest.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"unknown bundle format {manifest.get('format')!r}")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = T.tensor_read(os.path.join(dirpath, entry["file"]))
        shape = tuple(entry["shape"])
        want = int(np.prod(shape)) if shape else 1
        if arr.size != want:
            raise FormatError(f"tensor {name}: file size mismatches manifest shape")
        tensors[name] = arr.reshape(shape)
    return manifest, tensors


def load_params(dirpath):
    """Load (params, cfg) previously written by save_params."""
    manifest, tensors = load_bundle(dirpath)
    cfg = DgmnConfig.from_dict(manifest["config"])

    def take(name):
        try:
            return tensors[name]
        except KeyError:
            raise FormatError(f"bundle is missing tensor {name!r}")

    def conv(prefix, dilation, groups=1):
        return Conv2dParams(take(prefix + ".weight"), take(prefix + ".bias"),
                            dilation=dilation, groups=groups)

    dyn = [conv(f"dyn_conv{q}", cfg.rates[q]) for q in range(cfg.num_rates)]
    walks = None
    if cfg.enable_ds:
        walks = [conv(f"walk_conv{q}", cfg.rates[q]) for q in range(cfg.num_rates)]
    static = tensors.get("static_weights")
    params = DgmnParams(conv("value_transform", 1), conv("output_transform", 1),
                        dyn, walks, static, take("betas"), take("alpha").reshape(()))
    validate_params(cfg, params)
    return params, cfg
