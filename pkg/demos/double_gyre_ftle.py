"""FTLE field of the time-periodic double gyre, printed as a coarse ASCII map.

Run: python demos/double_gyre_ftle.py [out.csv]
"""

import sys

import numpy as np

from scoreflow.ftle import double_gyre, ftle_field, global_lyapunov_time

xs = np.linspace(0.0125, 1.9875, 80)
ys = np.linspace(0.0125, 0.9875, 40)
field = ftle_field(double_gyre(), xs, ys, tau0=0.0, dtau=15.0, h_fd=1e-3, steps=300)

print(f"max chi {field.chi.max():.3f}  global Lyapunov time {global_lyapunov_time(field):.2f}")
shades = " .:-=+*#%@"
levels = np.clip(field.chi / field.chi.max(), 0, 1)
for j in range(len(ys) - 1, -1, -4):
    print("".join(shades[int(v * (len(shades) - 1))] for v in levels[::2, j]))

if len(sys.argv) > 1:
    field.write_csv(sys.argv[1])
