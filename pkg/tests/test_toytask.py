import numpy as np
import pytest

from dgmn.errors import ConfigError, DivergenceError, UsageError
from dgmn.layer import DgmnConfig
from dgmn.toytask import (KEY_HALF, SQUARE_HALF, TrainConfig, cross_entropy,
                          curve_from_csv_text, curve_to_csv_text, evaluate,
                          init_model, load_model, make_context_dataset,
                          model_named_params, save_model, train_loop)


def tiny_cfg(**kw):
    base = dict(steps=2, lr=0.5, batch_size=2, seed=5, model="dgmn",
                dgmn=DgmnConfig(channels=8, rates=(1, 4), groups=2))
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def test_dataset_deterministic():
    a = make_context_dataset(9, 20)
    b = make_context_dataset(9, 20)
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.labels, y.labels)
               and x.key_pos == y.key_pos and x.square_pos == y.square_pos
               for x, y in zip(a, b))
    c = make_context_dataset(10, 20)
    assert any(not np.array_equal(x.image, y.image) for x, y in zip(a, c))


def test_dataset_invariants():
    for s in make_context_dataset(1, 100):
        ky, kx = s.key_pos
        sy, sx = s.square_pos
        # key patch sits in the top-left corner region
        assert ky <= 4 and kx <= 4
        # Chebyshev separation: >= 12 between centers and between the patches
        assert max(abs(ky - sy), abs(kx - sx)) >= 12
        assert max(abs(ky - sy), abs(kx - sx)) - KEY_HALF - SQUARE_HALF >= 12
        # labels: key patch and target square carry the key class
        assert np.all(s.labels[ky - 1 : ky + 2, kx - 1 : kx + 2] == s.key_class)
        sq = s.labels[sy - 2 : sy + 3, sx - 2 : sx + 3]
        assert sq.shape == (5, 5) and np.all(sq == s.key_class)
        # everything else is background
        total = np.sum(s.labels == s.key_class)
        assert total == 9 + 25
        # the square looks white (class-neutral) in the image
        assert np.all(s.image[:, sy - 2 : sy + 3, sx - 2 : sx + 3] == 1.0)
        # no class evidence within 5 pixels of the square: both class channels
        # are identical there (local models are blind to the key class)
        other = (3 - s.key_class) - 1
        y0, y1 = max(0, sy - 7), sy + 8
        x0, x1 = max(0, sx - 7), sx + 8
        near = s.image[:, y0:y1, x0:x1]
        assert np.array_equal(near[other], near[s.key_class - 1])


def test_dataset_class_balance():
    samples = make_context_dataset(2, 1000)
    frac = np.mean([s.key_class == 1 for s in samples])
    assert 0.45 <= frac <= 0.55


def test_dataset_count_validation():
    with pytest.raises(ConfigError):
        make_context_dataset(0, 0)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_zero_lr_keeps_loss_constant():
    data = make_context_dataset(3, 4)
    cfg = tiny_cfg(lr=0.0, steps=4, batch_size=4)
    _, curve = train_loop(cfg, data)
    losses = [r.loss for r in curve]
    assert max(losses) - min(losses) < 1e-12


def test_gradient_flow_after_steps():
    data = make_context_dataset(4, 4)
    cfg = tiny_cfg(steps=2, batch_size=4)
    before = {k: v.copy() for k, v in model_named_params(init_model(cfg)).items()}

    one, _ = train_loop(tiny_cfg(steps=1, batch_size=4), data)
    after1 = model_named_params(one)
    # step 1: residual scale, classifier and embed move; the message path is
    # still gated by alpha = 0, so the predictors cannot move yet
    assert np.linalg.norm(after1["layer.alpha"] - before["layer.alpha"]) > 0
    assert np.linalg.norm(after1["classifier.weight"] - before["classifier.weight"]) > 0
    assert np.linalg.norm(after1["embed.weight"] - before["embed.weight"]) > 0
    assert np.array_equal(after1["layer.dyn_conv0.weight"],
                          before["layer.dyn_conv0.weight"])
    assert np.array_equal(after1["layer.walk_conv0.weight"],
                          before["layer.walk_conv0.weight"])

    two, _ = train_loop(tiny_cfg(steps=2, batch_size=4), data)
    after2 = model_named_params(two)
    # step 2 enters with alpha != 0: every dynamic predictor now moves,
    # including the walk predictors
    assert np.linalg.norm(after2["layer.dyn_conv0.weight"]
                          - before["layer.dyn_conv0.weight"]) > 0
    assert np.linalg.norm(after2["layer.walk_conv0.weight"]
                          - before["layer.walk_conv0.weight"]) > 0


def test_training_deterministic():
    data = make_context_dataset(6, 8)
    cfg = tiny_cfg(steps=3)
    _, c1 = train_loop(cfg, data)
    _, c2 = train_loop(tiny_cfg(steps=3), data)
    assert abs(c1[-1].loss - c2[-1].loss) <= 1e-9
    assert [r.loss for r in c1] == [r.loss for r in c2]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # blow-up is the point
def test_divergence_reported_with_step():
    data = make_context_dataset(7, 4)
    with pytest.raises(DivergenceError, match="step"):
        train_loop(tiny_cfg(lr=1e12, clip_norm=0.0, steps=30, batch_size=4), data)


def test_clip_norm_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(clip_norm=-1.0)


def test_empty_dataset_errors():
    with pytest.raises(UsageError):
        train_loop(tiny_cfg(), [])
    model = init_model(tiny_cfg())
    with pytest.raises(UsageError):
        evaluate(model, [])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(steps=0)
    with pytest.raises(ConfigError):
        tiny_cfg(lr=-1.0)
    with pytest.raises(ConfigError):
        tiny_cfg(batch_size=0)
    with pytest.raises(ConfigError):
        tiny_cfg(model="transformer")
    with pytest.raises(ConfigError):
        tiny_cfg(momentum=1.0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_cross_entropy_matches_manual():
    logits = np.zeros((1, 3, 1, 2))
    logits[0, :, 0, 0] = (2.0, 0.0, -1.0)
    labels = np.zeros((1, 1, 2), dtype=np.int64)
    labels[0, 0, 1] = 2
    loss, grad = cross_entropy(logits, labels)
    p0 = np.exp(2.0) / (np.exp(2.0) + 1.0 + np.exp(-1.0))
    want = (-np.log(p0) - np.log(1.0 / 3.0)) / 2.0
    assert abs(loss - want) < 1e-12
    assert grad.shape == logits.shape


def test_constant_background_predictor_scores_zero_on_square():
    cfg = tiny_cfg(model="local_conv_baseline")
    model = init_model(cfg)
    model.classifier.weight[...] = 0.0
    model.classifier.bias[...] = (10.0, 0.0, 0.0)  # always predict background
    data = make_context_dataset(8, 10)
    m = evaluate(model, data)
    assert m.square_accuracy == 0.0
    assert m.iou[1] == 0.0 and m.iou[2] == 0.0
    assert m.pixel_accuracy > 0.9  # background dominates the images


def test_perfect_predictor_has_unit_iou(monkeypatch):
    # feed the ground-truth labels in as logits through a model stub
    data = make_context_dataset(12, 6)

    def forward(images, model):
        logits = np.zeros((images.shape[0], 3, 32, 32))
        for i, im in enumerate(images):
            s = next(x for x in data if np.array_equal(x.image, im))
            for c in range(3):
                logits[i, c] = (s.labels == c) * 10.0
        return logits, None

    import dgmn.toytask as tt
    monkeypatch.setattr(tt, "model_forward", forward)
    m = evaluate(object(), data)
    assert m.pixel_accuracy == 1.0 and m.square_accuracy == 1.0
    assert m.iou == [1.0, 1.0, 1.0] and m.mean_iou == 1.0


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["dgmn", "local_conv_baseline"])
def test_model_bundle_roundtrip(tmp_path, kind):
    data = make_context_dataset(13, 6)
    cfg = tiny_cfg(model=kind, steps=2, batch_size=3)
    model, _ = train_loop(cfg, data)
    save_model(tmp_path / "m", model)
    loaded = load_model(tmp_path / "m")
    assert loaded.kind == kind
    a = evaluate(model, data)
    b = evaluate(loaded, data)
    assert a.to_json_dict() == b.to_json_dict()


def test_curve_csv_roundtrip():
    data = make_context_dataset(14, 4)
    _, curve = train_loop(tiny_cfg(steps=3, batch_size=4), data)
    text = curve_to_csv_text(curve)
    back = curve_from_csv_text(text)
    assert [r.loss for r in back] == [r.loss for r in curve]
    assert curve_to_csv_text(back) == text
