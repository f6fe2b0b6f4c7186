#!/usr/bin/env python3
"""Per-concept energies, composition, and the model score.

Every concept head emits logits for its possible values; LogSumExp of those
logits is the concept's energy (a smooth stand-in for the best logit).  The
composed energy sums the per-concept energies, and minus its input gradient
is the model's score, which we verify here against finite differences.
"""

import numpy as np

from cbgen import (
    ConceptAssignment,
    NetConfig,
    composed_energy,
    concept_logits,
    init_network,
    make_world,
    model_score,
    per_concept_energy,
    predict_concepts,
)

world = make_world(d=8, seed=0)
net = init_network(
    world.spec,
    NetConfig(d=8, t_scale=100, hidden=32, time_dim=16, head_init="normal"),
    seed=7,
)

rng = np.random.default_rng(0)
v, t = rng.normal(size=8), 20
C = ConceptAssignment((1, 0, 1, 0))

print("per-concept energies (LogSumExp of each head's logits):")
total = 0.0
for k, name in enumerate(world.spec.names):
    logits = concept_logits(net, v, t, k, C.values[k])
    e = per_concept_energy(net, v, t, k, C.values[k])
    total += e
    print(f"  {name}[={C.values[k]}]: logits {np.round(logits, 3)} -> energy {e:.4f}")
print(f"composed energy = {composed_energy(net, v, t, C):.4f} (sum of the above: {total:.4f})")

print("\nconcept predictions (softmax over the diagonal readout):")
for name, p in zip(world.spec.names, predict_concepts(net, v, t)):
    print(f"  {name}: {np.round(p, 4)}")

# minus the gradient of the composed energy is the score; check one
# coordinate against a central finite difference
s = model_score(net, v, t, C)
h = 1e-5
vp, vm = v.copy(), v.copy()
vp[0] += h
vm[0] -= h
fd = (composed_energy(net, vp, t, C) - composed_energy(net, vm, t, C)) / (2 * h)
print(f"\nscore[0] = {s[0]:+.6f}, -finite-difference = {-fd:+.6f}")
