"""The multiresolution hierarchy behind the U-shaped model.

Farthest point sampling picks coarse nodes, every fine node joins its
nearest seed by hop count, and coarse edges come from contracting fine
edges. Pooling takes the cluster max; unpooling copies it back.
"""
import numpy as np

from surgformer.hierarchy import build_hierarchy, pool_max, unpool_broadcast
from surgformer.mesh import generate_bar_mesh

mesh = generate_bar_mesh(14, 4, 4, (0.14, 0.04, 0.04))
h = build_hierarchy(mesh, (0.25, 0.25, 0.25))
print("level sizes:", h.sizes)
for l, lv in enumerate(h.levels):
    degree = np.diff(lv.edges.indptr) - 1
    print(f"  level {l}: {lv.size:4d} nodes, mean degree {degree.mean():5.2f}")

x = mesh.vertices[:, :1]
coarse = pool_max(x, h.clusters[0])
back = unpool_broadcast(coarse, h.owners[0])
print(f"pool x over level 0 clusters: {coarse.shape[0]} values, max gap to broadcast {np.abs(back - x).max():.4f} m")
sizes = np.bincount(h.owners[0])
print(f"cluster sizes at level 1: min {sizes.min()}, max {sizes.max()}, mean {sizes.mean():.2f}")
