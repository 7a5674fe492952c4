"""Offline greedy, online solves and a posteriori certificates.

The offline stage solves the full model on a training grid, builds the EIM
expansion, estimates the stability constants and grows a reduced basis until
the certified error bound drops below the target.  The online stage then
solves a system of a few dozen unknowns and returns a bound on the error
that can be checked here against the full-order answer.

    python3 demos/03_certified_reduced_basis.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from cavityrb.fom import FullOrderModel
from cavityrb.pipeline import OfflineArtifact, RunConfig, run_benchmark, run_offline

workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="cavityrb-"))
config = RunConfig(ra_min=1e3, ra_max=1e4, n_h=16, eps_rb=1e-3)
fom = FullOrderModel(config.n_h)

print(f"offline stage -> {workdir / 'artifact'}")
built = run_offline(config, workdir / "artifact", fom=fom)
print(f"EIM terms: {built.eim.size}, reduced basis size: {built.basis.n}")
# The indicator is the bound where tau <= 1 and tau itself elsewhere, which is
# why the early values are huge: the certificate does not exist yet.
print(f"{'N':>3} {'Ra picked':>10} {'indicator':>11}")
for row in built.greedy_log:
    print(f"{row['n']:3d} {row['rayleigh']:10.1f} {row['max_indicator']:11.3e}")

# The saved artifact is all the online stage needs (timings stay in logs/).
art = OfflineArtifact.load(workdir / "artifact", config)
mus = config.box.sample(5, np.random.default_rng(11))
rows = run_benchmark(art, mus, fom=fom, repeats=3)
print(f"\n{'Ra':>8} {'error u':>9} {'bound':>9} {'tau':>8} {'T_FE':>7} {'T_RB':>9} {'speedup':>8}")
for r in rows:
    print(f"{r['rayleigh']:8.0f} {r['velocity_h1']:9.1e} {r['delta']:9.1e} {r['tau']:8.1e} "
          f"{r['t_fe']:7.2f} {r['t_online']:9.1e} {r['speedup']:8.0f}")
print("\nThe bound uses an inf-sup surrogate here; tests/test_acceptance.py repeats the check "
      "with the exact inf-sup constant.")
