#!/usr/bin/env python3
"""Energy landscapes in a 2-D world.

With d = 2 the whole latent space fits in a picture.  This trains a tiny
model on two axis-ish concepts and grids the intervention energy over the
plane at several timesteps, writing a PNG heatmap next to this script.
The same grids are what the playground's /energy_grid endpoint serves.
"""

from pathlib import Path

import numpy as np

from cbgen import NetConfig, make_schedule, make_world
from cbgen.sampler import SamplerConfig, compose, run_sampler_batch
from cbgen.trainer import TrainConfig, train

world = make_world(d=2, concept_names=("Right", "Up"), seed=3)
schedule = make_schedule("cosine", T=50)
print("training a 2-D model (1500 steps)...")
ckpt = train(
    world, schedule, TrainConfig(steps=1500, batch_size=128, seed=0, eval_every=500),
    NetConfig(d=2, t_scale=50, hidden=48, time_dim=16),
)

spec = compose(world.spec, [("active", "Right", 1), ("active", "Up", 1)])
res, extent = 81, 3.0
coords = np.linspace(-extent, extent, res)
uu, vv = np.meshgrid(coords, coords, indexing="ij")
pts = np.stack([uu.ravel(), vv.ravel()], axis=1)

from cbgen.sampler import intervention_grad_batch

grids = {}
for t in (50, 25, 1):
    _, e_row, _ = intervention_grad_batch(ckpt.net, pts, t, spec)
    grids[t] = e_row.reshape(res, res)
    lo = pts[np.argmin(e_row)]
    print(f"t={t:3d}: energy min at ({lo[0]:+.2f}, {lo[1]:+.2f})")

finals, _, _ = run_sampler_batch(ckpt.net, schedule, spec, SamplerConfig(seed=2), n=400)
print(f"samples concentrate at ({finals[:,0].mean():+.2f}, {finals[:,1].mean():+.2f})")

from cbgen.evalsuite import concept_accuracy

acc = concept_accuracy(world, finals, spec)
print(f"oracle agreement with +Right,+Up: {acc['per_concept']} (joint {acc['joint']:.2f})")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(13, 4), constrained_layout=True)
    for ax, (t, grid) in zip(axes, grids.items()):
        im = ax.imshow(
            grid.T, origin="lower", extent=[-extent, extent, -extent, extent], cmap="viridis"
        )
        ax.scatter(finals[:, 0], finals[:, 1], s=2, c="white", alpha=0.4)
        ax.set_title(f"intervention energy at t={t}")
        fig.colorbar(im, ax=ax, shrink=0.8)
    out = Path(__file__).with_name("energy_landscape.png")
    fig.savefig(out, dpi=110)
    print(f"wrote {out}")
except ImportError:
    print("matplotlib not available; skipped the figure")
