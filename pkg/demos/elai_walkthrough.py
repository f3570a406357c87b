"""Which neighbours does the interactor pick in a cut-in, before and after a little training?

Trains a small model on a handful of interactive scenes and prints, for one
held-out cut-in, the interaction scores, the Top-k selection, the refinement
weights and the focal weights that drive the extra motion supervision.
"""

import numpy as np

from egofocus.losses import focal_weights
from egofocus.model import ModelConfig, forward, init_params, training_step
from egofocus.nn import OptimState
from egofocus.scenarios import INTERACTIVE_KINDS, generate_scenario


def describe(params, scene, cfg, title):
    out = forward(params, scene, cfg)
    sel = out.bundle.selection
    w = focal_weights(sel).weights.data
    print(f"\n{title}")
    print(f"  scripted interactor: agent {scene.interacting}")
    print("  agent   score   selected   alpha    focal w")
    for i, s in enumerate(out.bundle.scores.data):
        if i in sel.indices:
            j = sel.indices.index(i)
            print(f"  {i:5d} {s:7.3f}   yes      {sel.alpha.data[j]:7.3f}  {w[j]:7.3f}")
        else:
            print(f"  {i:5d} {s:7.3f}   no")


def main():
    cfg = ModelConfig(k=3)
    params = init_params(cfg)
    scene = generate_scenario("cut_in", 7)
    describe(params, scene, cfg, "untrained model")

    train = [generate_scenario(kind, seed) for seed in range(100, 112) for kind in INTERACTIVE_KINDS]
    optim = OptimState(lr=3e-3)
    rng = np.random.default_rng(0)
    for step in range(300):
        batch = [train[i] for i in rng.choice(len(train), size=8, replace=False)]
        params, rep = training_step(batch, params, optim, cfg)
        if step % 100 == 0:
            print(f"step {step:3d}  total {rep.total:.3f}  plan {rep.plan:.3f}  fla {rep.fla:.3f}")
    describe(params, scene, cfg, "after 300 steps")


if __name__ == "__main__":
    main()
