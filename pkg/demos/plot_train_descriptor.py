"""
Training the corner descriptor network
======================================

Corners from a few rooms are sampled at every orientation of a coarse
angle lattice. A small run of triplet training (two orientations of one
corner against an orientation of another) is enough to see the held-out
error rate fall below that of the untrained network.

The full-size run (2,000 iterations of 256 triplets on the 30-degree
lattice) takes about 20 minutes on one CPU core; this demo uses the
90-degree lattice and a few hundred iterations.
"""

import math

import numpy as np

from voxreg.descriptor.training import eval_error_rate, synthesize_training_set, train
from voxreg.synth import room_scene, render_scene

train_rooms = [render_scene(room_scene(seed=s), spacing=0.1) for s in range(3)]
held_out = [render_scene(room_scene(seed=s), spacing=0.1) for s in (100, 101)]

# 4 angles per axis: 64 orientations per corner
ds = synthesize_training_set(train_rooms, angle_step=math.pi / 2, max_corners_per_scene=40)
ev = synthesize_training_set(held_out, angle_step=math.pi / 2, max_corners_per_scene=30, seed=1)
print(f"training corners {ds.n_corners}, held-out corners {ev.n_corners}, orientations {ds.n_orientations}")


def progress(step, loss):
    if step % 50 == 0:
        print(f"  step {step} loss {loss:.4f}")


# zero iterations returns the initial weights, the baseline to beat
untrained, _ = train(ds, iterations=0)
net, losses = train(ds, iterations=300, batch_size=128, lr=1e-4, callback=progress)

# the error rate draws random test and proposal orientations, so average a few draws
before = np.mean([eval_error_rate(untrained, ev, seed=s) for s in range(10)])
after = np.mean([eval_error_rate(net, ev, seed=s) for s in range(10)])
print(f"held-out error rate {before:.3f} untrained, {after:.3f} after training")
print(f"mean loss first 50 steps {losses[:50].mean():.4f}, last 50 {losses[-50:].mean():.4f}")
