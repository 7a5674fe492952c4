"""Empirical interpolation of the eddy viscosity.

The Smagorinsky viscosity depends nonlinearly on the velocity gradient, so it
has no affine split in the parameters.  EIM replaces it by a short expansion
in fields picked greedily from snapshots, sampled at a few "magic" quadrature
points.  This demo builds that expansion on a coarse grid and shows how fast
the sup-norm error decays with the number of terms.

    python3 demos/02_empirical_interpolation.py
"""

import time

import numpy as np

from cavityrb.eim import eim_build
from cavityrb.fom import FullOrderModel
from cavityrb.mesh import ParameterBox

fom = FullOrderModel(12)
box = ParameterBox((1e3, 1e4), (0.5, 2.0))
training = box.grid(5, 4)

t0 = time.perf_counter()
fields = np.array([fom.forms.eddy_viscosity_field(fom.solve(mu).velocity, mu.height)
                   for mu in training])
print(f"{len(training)} snapshots in {time.perf_counter() - t0:.1f} s, "
      f"{fields.shape[1]} quadrature points each")

eim = eim_build(fields, training, tol=1e-6)
print(f"\n{'M':>3} {'training sup error':>20}")
for m, err in enumerate(eim.training_errors, start=1):
    print(f"{m:3d} {err:20.3e}")

# A parameter outside the training grid tells us how well the expansion generalises.
rng = np.random.default_rng(3)
print("\nunseen parameters:")
for mu in box.sample(3, rng):
    truth = fom.forms.eddy_viscosity_field(fom.solve(mu).velocity, mu.height)
    err = np.abs(eim.interpolate(truth) - truth).max()
    print(f"  Ra={mu.rayleigh:7.0f}  height={mu.height:5.2f}  sup error {err:.2e} "
          f"(field max {truth.max():.2e})")
