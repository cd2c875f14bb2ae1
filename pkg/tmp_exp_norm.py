import numpy as np
from dgmn.toytask import *
from dgmn.tensor import derive_seed
from dgmn.layer import DgmnConfig


def run(tag, seed, train_n, steps=260, batch=6, lr=1.0):
    data = make_context_dataset(derive_seed(seed, 'train'), train_n)
    cfg = TrainConfig(steps=steps, lr=lr, batch_size=batch, seed=seed, model='dgmn',
                      clip_norm=1e9,
                      dgmn=DgmnConfig(channels=16, rates=(1, 16, 24), groups=4))
    model = init_model(cfg)
    params = model_named_params(model)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.Generator(np.random.Philox(key=np.uint64(derive_seed(seed, 'batches'))))
    order = []
    norms = []
    for step in range(steps):
        while len(order) < batch:
            order.extend(rng.permutation(len(data)).tolist())
        take, order = order[:batch], order[batch:]
        bt = [data[i] for i in take]
        images = np.stack([s.image for s in bt])
        labels = np.stack([s.labels for s in bt])
        logits, cache = model_forward(images, model)
        loss, gl = cross_entropy(logits, labels)
        if not np.isfinite(loss):
            print(f'{tag}: DIVERGED step {step}; recent norms '
                  f'{[f"{x:.1f}" for x in norms[-8:]]}', flush=True)
            return
        grads = model_backward(gl, model, cache)
        norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
        norms.append(norm)
        for k, a in params.items():
            velocity[k] = cfg.momentum * velocity[k] + grads[k]
            a -= lr * velocity[k]
        if step % 40 == 0 or norm > 50:
            print(f'{tag} step {step:3d} loss {loss:.4f} gnorm {norm:.2f} '
                  f'alpha {float(params["layer.alpha"]):.3f}', flush=True)
    ev = make_context_dataset(derive_seed(seed, 'eval'), 200)
    m = evaluate(model, ev)
    print(f'{tag}: done sqacc={m.square_accuracy:.4f} max_norm={max(norms):.1f} '
          f'p95={np.percentile(norms, 95):.1f}', flush=True)


run('GOOD(t240)', 11, 240)
run('BAD(t200)', 11, 200)
