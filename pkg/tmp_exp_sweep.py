import sys
import time

import numpy as np

from dgmn.layer import DgmnConfig
from dgmn.tensor import derive_seed
from dgmn.toytask import TrainConfig, evaluate, make_context_dataset, train_loop


def run(tag, seed, train_n=240, steps=260, batch=6, lr=1.0, model='dgmn'):
    data = make_context_dataset(derive_seed(seed, 'train'), train_n)
    ev = make_context_dataset(derive_seed(seed, 'eval'), 200)
    cfg = TrainConfig(steps=steps, lr=lr, batch_size=batch, seed=seed, model=model,
                      dgmn=DgmnConfig(channels=16, rates=(1, 16, 24), groups=4))
    t0 = time.time()
    try:
        model_, curve = train_loop(cfg, data)
    except Exception as exc:
        print(f'{tag}: seed={seed} train={train_n} DIVERGED: {exc}', flush=True)
        return
    dt = time.time() - t0
    m = evaluate(model_, ev)
    print(f'{tag}: seed={seed} model={model} steps={steps} train={train_n} '
          f'time={dt:.0f}s sqacc={m.square_accuracy:.4f} '
          f'final_loss={curve[-1].loss:.4f}', flush=True)


which = int(sys.argv[1])
if which == 0:
    run('S11', 11)
    run('S11-t200', 11, train_n=200)
    run('S5', 5)
elif which == 1:
    run('S99', 99)
    run('S123', 123)
    run('BASE11', 11, model='local_conv_baseline')
else:
    # overfit at the acceptance settings
    data = make_context_dataset(derive_seed(3, 'train'), 4)
    cfg = TrainConfig(steps=150, lr=1.0, batch_size=4, seed=3, model='dgmn',
                      dgmn=DgmnConfig(channels=16, rates=(1, 4), groups=4))
    t0 = time.time()
    model_, curve = train_loop(cfg, data)
    losses = [r.loss for r in curve]
    first = next((i for i, l in enumerate(losses) if l < 0.05), None)
    print(f'OVERFIT: time={time.time() - t0:.0f}s final={losses[-1]:.4f} '
          f'first<0.05 step {first}', flush=True)
