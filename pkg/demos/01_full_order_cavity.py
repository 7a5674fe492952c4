"""Full-order cavity solves: conduction, convection and the cost of one solve.

The cavity is heated from the left wall and cooled from the right.  At Ra = 0
the temperature is the linear conduction profile and the fluid is at rest.
As Ra grows a single convection roll develops, and the solution keeps the
centro-symmetry of the box.

    python3 demos/01_full_order_cavity.py [N_h]
"""

import sys
import time

import numpy as np

from cavityrb.fom import FullOrderModel
from cavityrb.mesh import ParameterPoint

n_h = int(sys.argv[1]) if len(sys.argv) > 1 else 16
fom = FullOrderModel(n_h)
space = fom.space
print(f"Taylor-Hood P2-P1 on a {n_h}x{n_h} triangulated square, {space.layout.size} unknowns")

conduction = fom.solve(ParameterPoint(0.0, 1.0))
print(f"Ra = 0: distance from the conduction state {space.x_norm(conduction, include_lift=False):.2e}")

print(f"\n{'Ra':>8} {'height':>7} {'|u|_H1':>10} {'max|u|':>9} {'steps':>6} {'seconds':>8}")
for ra, height in [(1e3, 1.0), (1e4, 1.0), (1e4, 0.5), (1e4, 2.0)]:
    t0 = time.perf_counter()
    sol = fom.solve(ParameterPoint(ra, height))
    elapsed = time.perf_counter() - t0
    u = sol.velocity
    speed = np.hypot(u[:space.n_p2], u[space.n_p2:]).max()
    steps = (sol.info or {}).get("steps", "-")
    print(f"{ra:8.0f} {height:7.2f} {np.hypot(space.h1_seminorm(u[:space.n_p2]), space.h1_seminorm(u[space.n_p2:])):10.3f} {speed:9.3f} {steps:>6} {elapsed:8.2f}")

# The eddy viscosity only acts on the resolved small scales, so it stays small.
mu = ParameterPoint(1e4, 1.0)
nu = fom.forms.eddy_viscosity_field(fom.solve(mu).velocity, mu.height)
print(f"\nSmagorinsky viscosity at Ra = 1e4: max {nu.max():.2e}, mean {nu.mean():.2e} "
      f"(molecular Prandtl number {fom.prandtl})")
