"""Train the three model families on a small spring-mass dataset.

Run with ``python3 demos/spring_quickstart.py``; takes about half a
minute.  The run is a quarter of the preset length on 20 trajectories, so
the drift gap between the Hamiltonian models and the baseline is modest
here; ``sympkan reproduce --experiment spring`` runs the full preset.
"""

import numpy as np

from sympkan import evaluation, systems
from sympkan.presets import get_preset, scaled
from sympkan.training import train

preset = scaled(get_preset("spring"), trajectories=20, step_factor=0.25)
data = systems.build_dataset(preset, seed=0)
print(f"{len(data.train)} train / {len(data.test)} test trajectories, "
      f"{data.train[0].states.shape[0]} samples each, noise variance {data.sigma2:g}")

# Each family trains with its preset config: Adam for the perceptrons,
# L-BFGS for the spline network.
models = {}
for kind in ("baseline", "hnn", "kar"):
    model, history = train(preset.config(kind, seed=0), data)
    models[kind] = model
    print(f"{kind:9s} {len(history):5d} steps  "
          f"train {history.train_loss:.4f}  test {history.test_loss:.4f}")

# Energy drift: roll each learned field out from clean test states and
# measure how far the true energy wanders.
initials = [t.z0 for t in data.test[:5]]
times = np.linspace(0.0, 20.0, 200)
for kind, model in models.items():
    mean, std, _, n_div = evaluation.energy_drift(model, data.system, initials, times)
    print(f"{kind:9s} energy drift {mean:.2e} +- {std:.1e}  ({n_div} diverged)")

# A learned Hamiltonian is conserved by its own flow, up to integrator error.
ro = evaluation.rollout(models["kar"], data.system, initials[0], times, rtol=1e-10, atol=1e-10)
h = ro.learned_energies
print(f"learned KAR energy varies by {np.ptp(h):.1e} along its rollout")
