"""How the fineness sampler and the pseudo-confidence loss behave on one phantom.

    python demos/sampler_and_loss.py
"""
import numpy as np

from airwayseg.loss import grad_airway, grad_background, loss_airway, loss_background
from airwayseg.phantom import PhantomConfig, generate
from airwayseg.sampler import MORE_HIGH, MORE_LOW, SamplerConfig, build_table
from airwayseg.training import cuboid_pool

case = generate(PhantomConfig(max_generation=3, seed=0))
pool = cuboid_pool([case], (32, 32, 32))
t = np.array([c.fineness for c in pool])
print(f"{len(pool)} cuboids, {np.count_nonzero(t)} contain airway; fineness range {t[t > 0].min():.2f}-{t.max():.2f}")

cfg = SamplerConfig()
for mode in (MORE_HIGH, MORE_LOW):
    p = build_table(pool, cfg, mode).probabilities
    fine = p[t >= np.quantile(t[t > 0], 0.75)].sum()
    empty = p[t == 0].sum()
    print(f"{mode:10s}: mass on the finest quarter {fine:.2f}, on airway-free cuboids {empty:.3f}")

# the airway term squares the confidence, so a voxel at p = 0.6 still reads as mostly background
a = np.array([1.0, 1.0, 0.0, 0.0])
for p in (np.array([0.6, 0.6, 0.1, 0.1]), np.array([0.9, 0.9, 0.1, 0.1])):
    print(f"p={p}: airway term {loss_airway(p, a):.3f} (plain dice {loss_background(p, a):.3f}), "
          f"airway grad {np.round(grad_airway(p, a), 3)}, dice grad {np.round(grad_background(p, a), 3)}")
