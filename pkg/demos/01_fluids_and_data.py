"""Non-dimensional numbers for the bundled fluids, then one synthetic trajectory.

    python demos/01_fluids_and_data.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from nucleus.datasets import GeneratorConfig, read_trajectory, synth_generate, write_trajectory
from nucleus.fluids import BoilingCondition, derive_nondimensional, fluid_names, load_properties
from nucleus.levelset import eikonal_residual

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# Each fluid at 40 K wall superheat, bulk at saturation.
print(f"{'fluid':8} {'l_c mm':>7} {'Re':>8} {'Pr':>6} {'St':>7}")
for name in fluid_names():
    p = load_properties(name)
    nd = derive_nondimensional(p, BoilingCondition(p.T_sat, p.T_sat + 40.0))
    print(f"{name:8} {nd.l_c * 1e3:7.3f} {nd.Re:8.2f} {nd.Pr:6.2f} {nd.St:7.4f}")

# A subcooled FC-72 pool: bubbles grow on the heater, detach, rise and shrink.
cfg = GeneratorConfig(steps=30)
tr = synth_generate(cfg, seed=0)
print(f"\ntrajectory {tr.data.shape}, dt={tr.dt}, dx={tr.dx}")
for step in (0, 10, 20, 29):
    T, Ux, Uy, phi = tr.data[step]
    vapor = (phi > 0).mean()
    print(f"step {step:2d}: vapor fraction {vapor:.3f}, max Uy {Uy.max():.3f}, "
          f"mean eikonal residual {eikonal_residual(phi)['mean']:.3f}")

path = out / "demo.nucl"
write_trajectory(tr, path)
back = read_trajectory(path)
print(f"\nwrote {path} ({path.stat().st_size} bytes), round trip exact: {np.array_equal(back.data, tr.data)}")
