"""
Training the residual diffusion model
=====================================

A short run on primitive flights, then conditional sampling next to the
single-step MLP baseline. Budgets here are small; expect rough numbers.
"""

import time

import numpy as np

from residiff.data import Normalizer, build_sequences
from residiff.diffusion import train_baseline_mlp, train_diffusion
from residiff.experiments import ExperimentConfig, fly_pid, primitive_dataset
from residiff.networks import MLPConfig, NoisePredictorConfig
from residiff.trajectory import composite_specs

cfg = ExperimentConfig(duration=10.0)
ds, logs = primitive_dataset(cfg)
norm = Normalizer.fit(ds)
print(len(logs), "flights,", len(ds), "windows of", ds.horizon, "steps")

t0 = time.time()
# the preset budget: 4000 steps with weight averaging, a few minutes on one core
diff = train_diffusion(ds, norm, cfg.train_config(), NoisePredictorConfig(horizon=ds.horizon))
mlp = train_baseline_mlp(ds, norm, cfg.mlp_train_config(), MLPConfig())
print("trained both in %.0f s; final diffusion loss %.3f" % (time.time() - t0, np.mean(diff.losses[-100:])))

# held-out composite flight
test = build_sequences(fly_pid(composite_specs()[0], cfg.plant(), cfg.wind(), cfg, seed=99), ds.horizon)
idx = np.arange(0, len(test), 10)
zeta, u, h = test.zeta[idx, 0], test.u[idx, 0], test.h[idx, 0]
rng = np.random.default_rng(0)
draw = diff.sample(zeta, u, rng)            # (n, H, 3) sequences
rms = lambda e: np.sqrt(np.mean(np.sum(e ** 2, axis=1)))  # noqa: E731
print("first-step rmse  diffusion %.3f N   mlp %.3f N" % (rms(draw[:, 0] - h), rms(mlp.predict(zeta, u) - h)))
print("one sampled sequence, z axis:", np.round(draw[0, :, 2], 2))
