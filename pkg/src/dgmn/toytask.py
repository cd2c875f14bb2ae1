"""Synthetic long-range-context segmentation task.

Each 32x32 image contains a 3x3 "key" patch near the top-left corner whose
color encodes a class (1 -> channel 0, 2 -> channel 1), surrounded by a small
class-colored halo, and a white 5x5 "target square" placed far away (the
displacement from the key is one of a fixed set of axis/diagonal offsets at
Chebyshev distance >= 16, at least 12 between the patches themselves). Labels
are 0 for background, and the key class on both the key patch and the target
square. Classifying the square correctly therefore requires reading the key's
color from across the image: any local model whose receptive field is smaller
than the separation can do no better than chance on the square.

The model head is deliberately thin so the long-range hop is attributable to
the message passing layer alone: 1x1 embed (3 -> C), one layer (the sampled
message passing layer, or a single 3x3 convolution for the local baseline),
1x1 classifier (C -> 3), pixelwise softmax cross-entropy. Training is plain
SGD with momentum; everything is deterministic given the seed.
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .errors import ConfigError, DivergenceError, UsageError
from . import tensor as T
from .tensor import Conv2dParams, conv2d, conv2d_backward, derive_seed, init_conv, rng_fill
from .layer import (DgmnConfig, dgmn_backward, dgmn_forward, init_params,
                    load_bundle, named_params, save_bundle, save_params)

NUM_CLASSES = 3
KEY_HALF = 1      # key patch is 3x3
SQUARE_HALF = 2   # target square is 5x5

DEFAULT_RATES = (1, 16, 24)


def default_layer_config(channels: int = 16) -> DgmnConfig:
    return DgmnConfig(channels=channels, rates=DEFAULT_RATES, groups=4)


class ContextSample:
    """One task instance: image (3, s, s), labels (s, s), placement metadata."""

    def __init__(self, image, labels, key_pos, square_pos, key_class):
        self.image = image
        self.labels = labels
        self.key_pos = tuple(key_pos)
        self.square_pos = tuple(square_pos)
        self.key_class = int(key_class)


def make_context_dataset(seed: int, count: int, size: int = 32,
                         long_rates=(16, 24), halo_radius: float = 5.0,
                         halo_peak: float = 0.7, key_jitter=(2, 3)) -> list:
    """Deterministically generate `count` samples.

    The square center sits at key + r*(1,1), key + r*(1,0) or key + r*(0,1)
    for r in long_rates, so a tap grid with a matching sampling rate always
    has one tap landing inside the key's halo. The halo never comes within
    9 pixels of the square, keeping the class invisible to local models.
    """
    if count < 1:
        raise ConfigError(f"dataset count must be >= 1, got {count}")
    lo, hi = key_jitter
    displacements = [(r * dy, r * dx) for r in long_rates
                     for dy, dx in ((1, 1), (1, 0), (0, 1))]
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed & (2**64 - 1))))
    samples = []
    for _ in range(count):
        key_class = int(rng.integers(1, NUM_CLASSES))
        ky = int(rng.integers(lo, hi + 1))
        kx = int(rng.integers(lo, hi + 1))
        while True:
            dy, dx = displacements[int(rng.integers(len(displacements)))]
            sy, sx = ky + dy, kx + dx
            if SQUARE_HALF <= sy < size - SQUARE_HALF and \
                    SQUARE_HALF <= sx < size - SQUARE_HALF:
                break
        image = np.zeros((3, size, size))
        chan = key_class - 1
        yy, xx = np.mgrid[0:size, 0:size]
        dist = np.sqrt((yy - ky) ** 2 + (xx - kx) ** 2)
        image[chan] = halo_peak * np.clip(1.0 - dist / halo_radius, 0.0, None)
        image[chan, ky - KEY_HALF : ky + KEY_HALF + 1,
              kx - KEY_HALF : kx + KEY_HALF + 1] = 1.0
        image[:, sy - SQUARE_HALF : sy + SQUARE_HALF + 1,
              sx - SQUARE_HALF : sx + SQUARE_HALF + 1] = 1.0
        labels = np.zeros((size, size), dtype=np.int64)
        labels[ky - KEY_HALF : ky + KEY_HALF + 1,
               kx - KEY_HALF : kx + KEY_HALF + 1] = key_class
        labels[sy - SQUARE_HALF : sy + SQUARE_HALF + 1,
               sx - SQUARE_HALF : sx + SQUARE_HALF + 1] = key_class
        samples.append(ContextSample(image, labels, (ky, kx), (sy, sx), key_class))
    return samples


class TrainConfig:
    """Training hyperparameters for the toy task."""

    MODELS = ("dgmn", "local_conv_baseline")

    def __init__(self, steps: int, lr: float, batch_size: int, seed: int,
                 model: str = "dgmn", momentum: float = 0.9,
                 clip_norm: float = 1.0, dgmn: DgmnConfig | None = None):
        self.steps = int(steps)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.clip_norm = float(clip_norm)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.model = model
        self.dgmn = dgmn if dgmn is not None else default_layer_config()
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be >= 0 (0 disables), got {self.clip_norm}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if model not in self.MODELS:
            raise ConfigError(f"model must be one of {self.MODELS}, got {model!r}")


class ToyModel:
    """embed (1x1) -> core layer -> classifier (1x1)."""

    def __init__(self, kind, embed, classifier, dgmn_params=None, dgmn_cfg=None,
                 local_conv=None):
        self.kind = kind
        self.embed = embed
        self.classifier = classifier
        self.dgmn_params = dgmn_params
        self.dgmn_cfg = dgmn_cfg
        self.local_conv = local_conv


def init_model(cfg: TrainConfig) -> ToyModel:
    C = cfg.dgmn.channels
    embed = init_conv(3, C, 1, seed=derive_seed(cfg.seed, "embed"),
                      dist="normal", std=0.4)
    classifier = init_conv(C, NUM_CLASSES, 1, seed=derive_seed(cfg.seed, "classifier"),
                           dist="normal", std=0.4)
    if cfg.model == "dgmn":
        return ToyModel("dgmn", embed, classifier,
                        dgmn_params=init_params(cfg.dgmn, derive_seed(cfg.seed, "layer")),
                        dgmn_cfg=cfg.dgmn)
    local = init_conv(C, C, 3, seed=derive_seed(cfg.seed, "local"),
                      dist="normal", std=0.2)
    return ToyModel("local_conv_baseline", embed, classifier, local_conv=local)


def model_named_params(model: ToyModel) -> dict:
    out = {
        "embed.weight": model.embed.weight, "embed.bias": model.embed.bias,
        "classifier.weight": model.classifier.weight,
        "classifier.bias": model.classifier.bias,
    }
    if model.kind == "dgmn":
        for name, arr in named_params(model.dgmn_params).items():
            out["layer." + name] = arr
    else:
        out["local_conv.weight"] = model.local_conv.weight
        out["local_conv.bias"] = model.local_conv.bias
    return out


def model_forward(images: np.ndarray, model: ToyModel):
    """Returns (logits, cache) for a batch of images (b, 3, s, s)."""
    feat = conv2d(images, model.embed)
    if model.kind == "dgmn":
        hidden, core_cache = dgmn_forward(feat, model.dgmn_params, model.dgmn_cfg)
    else:
        pre = conv2d(feat, model.local_conv)
        hidden = T.relu(pre)
        core_cache = pre
    logits = conv2d(hidden, model.classifier)
    return logits, (images, feat, hidden, core_cache)


def model_backward(grad_logits: np.ndarray, model: ToyModel, cache) -> dict:
    images, feat, hidden, core_cache = cache
    grads = {}
    ghidden, grads["classifier.weight"], grads["classifier.bias"] = \
        conv2d_backward(hidden, model.classifier, grad_logits)
    if model.kind == "dgmn":
        gfeat, layer_grads = dgmn_backward(ghidden, core_cache)
        for name, arr in layer_grads.items():
            grads["layer." + name] = arr
    else:
        gpre = T.relu_backward(core_cache, ghidden)
        gfeat, grads["local_conv.weight"], grads["local_conv.bias"] = \
            conv2d_backward(feat, model.local_conv, gpre)
    _, grads["embed.weight"], grads["embed.bias"] = \
        conv2d_backward(images, model.embed, gfeat)
    return grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean pixelwise softmax cross-entropy. Returns (loss, grad_logits)."""
    b, c, h, w = logits.shape
    probs = T.softmax_lastk(logits, axis=1)
    onehot = np.zeros_like(logits)
    bb, yy, xx = np.meshgrid(np.arange(b), np.arange(h), np.arange(w), indexing="ij")
    onehot[bb, labels, yy, xx] = 1.0
    picked = np.clip(probs[bb, labels, yy, xx], 1e-300, None)
    loss = float(-np.mean(np.log(picked)))
    grad = (probs - onehot) / (b * h * w)
    return loss, grad


def _stack(samples) -> tuple:
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples])
    return images, labels


def _square_mask(samples) -> np.ndarray:
    masks = np.zeros((len(samples),) + samples[0].labels.shape, dtype=bool)
    for i, s in enumerate(samples):
        sy, sx = s.square_pos
        masks[i, sy - SQUARE_HALF : sy + SQUARE_HALF + 1,
              sx - SQUARE_HALF : sx + SQUARE_HALF + 1] = True
    return masks


class StepRecord:
    def __init__(self, step, loss, pixel_accuracy, square_accuracy):
        self.step = int(step)
        self.loss = float(loss)
        self.pixel_accuracy = float(pixel_accuracy)
        self.square_accuracy = float(square_accuracy)


def train_loop(cfg: TrainConfig, data) -> tuple:
    """SGD with momentum over the dataset. Returns (model, [StepRecord])."""
    if not data:
        raise UsageError("train_loop: empty dataset")
    model = init_model(cfg)
    params = model_named_params(model)
    velocity = {name: np.zeros_like(arr) for name, arr in params.items()}
    order_rng = np.random.Generator(
        np.random.Philox(key=np.uint64(derive_seed(cfg.seed, "batches"))))
    order = []
    curve = []
    for step in range(cfg.steps):
        while len(order) < cfg.batch_size:
            order.extend(order_rng.permutation(len(data)).tolist())
        take, order = order[: cfg.batch_size], order[cfg.batch_size :]
        batch = [data[i] for i in take]
        images, labels = _stack(batch)
        logits, cache = model_forward(images, model)
        loss, grad_logits = cross_entropy(logits, labels)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        pred = np.argmax(logits, axis=1)
        sq = _square_mask(batch)
        record = StepRecord(step, loss, float(np.mean(pred == labels)),
                            float(np.mean(pred[sq] == labels[sq])))
        curve.append(record)
        if cfg.lr == 0.0:
            continue
        grads = model_backward(grad_logits, model, cache)
        # global-norm clip keeps rare cliff gradients (saturated affinities,
        # runaway walks) from destabilizing the constant-lr schedule
        if cfg.clip_norm > 0:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if np.isfinite(norm) and norm > cfg.clip_norm:
                factor = cfg.clip_norm / norm
                grads = {k: g * factor for k, g in grads.items()}
        for name, arr in params.items():
            velocity[name] = cfg.momentum * velocity[name] + grads[name]
            arr -= cfg.lr * velocity[name]
    return model, curve


class Metrics:
    def __init__(self, pixel_accuracy, square_accuracy, iou):
        self.pixel_accuracy = float(pixel_accuracy)
        self.square_accuracy = float(square_accuracy)
        self.iou = [float(v) for v in iou]

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou))

    def to_json_dict(self) -> dict:
        return {"pixel_accuracy": self.pixel_accuracy,
                "square_accuracy": self.square_accuracy,
                "iou": self.iou, "mean_iou": self.mean_iou}


def evaluate(model: ToyModel, data, batch_size: int = 25) -> Metrics:
    """Deterministic metrics over a dataset: accuracy and per-class IoU."""
    if not data:
        raise UsageError("evaluate: empty dataset")
    correct = 0
    total = 0
    sq_correct = 0
    sq_total = 0
    inter = np.zeros(NUM_CLASSES)
    union = np.zeros(NUM_CLASSES)
    for start in range(0, len(data), batch_size):
        batch = data[start : start + batch_size]
        images, labels = _stack(batch)
        logits, _ = model_forward(images, model)
        pred = np.argmax(logits, axis=1)
        correct += int(np.sum(pred == labels))
        total += labels.size
        sq = _square_mask(batch)
        sq_correct += int(np.sum(pred[sq] == labels[sq]))
        sq_total += int(np.sum(sq))
        for c in range(NUM_CLASSES):
            inter[c] += np.sum((pred == c) & (labels == c))
            union[c] += np.sum((pred == c) | (labels == c))
    iou = [inter[c] / union[c] if union[c] > 0 else 1.0 for c in range(NUM_CLASSES)]
    return Metrics(correct / total, sq_correct / sq_total, iou)


# ---------------------------------------------------------------------------
# Reports and model bundles
# ---------------------------------------------------------------------------

def curve_to_csv_text(curve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "pixel_accuracy", "square_accuracy"])
    for r in curve:
        writer.writerow([r.step, repr(r.loss), repr(r.pixel_accuracy),
                         repr(r.square_accuracy)])
    return buf.getvalue()


def curve_from_csv_text(text: str) -> list:
    return [StepRecord(int(r["step"]), float(r["loss"]), float(r["pixel_accuracy"]),
                       float(r["square_accuracy"]))
            for r in csv.DictReader(io.StringIO(text))]


def write_metrics_json(metrics_dict: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(metrics_dict, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_model(dirpath, model: ToyModel) -> None:
    """Serialize a toy model with the layer's bundle format (+head tensors)."""
    extra = {
        "embed.weight": model.embed.weight, "embed.bias": model.embed.bias,
        "classifier.weight": model.classifier.weight,
        "classifier.bias": model.classifier.bias,
    }
    if model.kind == "dgmn":
        save_params(dirpath, model.dgmn_params, model.dgmn_cfg,
                    extra_tensors=extra, extra_meta={"model": model.kind})
    else:
        extra["local_conv.weight"] = model.local_conv.weight
        extra["local_conv.bias"] = model.local_conv.bias
        save_bundle(dirpath, extra, {"model": model.kind,
                                     "channels": model.local_conv.c_in})


def load_model(dirpath) -> ToyModel:
    from .layer import load_params  # local import to keep the namespace tidy

    manifest, tensors = load_bundle(dirpath)
    kind = manifest.get("model", "dgmn")
    embed = Conv2dParams(tensors["embed.weight"], tensors["embed.bias"])
    classifier = Conv2dParams(tensors["classifier.weight"], tensors["classifier.bias"])
    if kind == "dgmn":
        params, cfg = load_params(dirpath)
        return ToyModel(kind, embed, classifier, dgmn_params=params, dgmn_cfg=cfg)
    local = Conv2dParams(tensors["local_conv.weight"], tensors["local_conv.bias"])
    return ToyModel(kind, embed, classifier, local_conv=local)
