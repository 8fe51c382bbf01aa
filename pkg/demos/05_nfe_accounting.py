"""
Counting function evaluations
=============================

Guided sampling costs two evaluations per step for generation and three for
editing, but only inside the guidance interval. The speedups of a 6-step
student follow from those counts.
"""

import numpy as np

from hyperlab.bench.nfe import guided_baselines, stage_table
from hyperlab.flow.core import time_grid

grid = time_grid(50, 3.0)[:-1]
inside = int(((grid >= 0.4) & (grid <= 1.0)).sum())
print(f"{inside} of 50 step start times fall in [0.4, 1] on the shift-3 grid")
print("baselines", guided_baselines())
for row in stage_table():
    print(f"{row.name:10s} {row.baseline_nfe:4d} -> {row.distilled_nfe} NFE = {row.speedup}x")
print("step starts near the noise end:", np.round(grid[:5], 3))
