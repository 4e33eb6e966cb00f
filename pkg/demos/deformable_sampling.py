"""Deformable attention reads a handful of points per level instead of every token.

With freshly initialised weights each query averages bilinear samples taken
at fixed offsets around its reference point. Moving a query's reference point
moves what it reads; nothing else in the pyramid matters.

    python demos/deformable_sampling.py
"""
import numpy as np

from attrdet.encoder import MSDeformAttn, reference_points
from attrdet.tensor import Tensor

rng = np.random.default_rng(0)
shapes = [(4, 4), (8, 8)]
dim = 8
attn = MSDeformAttn(rng, dim, heads=2, levels=2, points=2)

value = Tensor(rng.normal(size=(sum(h * w for h, w in shapes), dim)))
query = Tensor(np.zeros((2, dim)))
ref = np.array([[0.2, 0.2], [0.8, 0.8]])
before = attn(query, ref, value, shapes).data

# change one token far from both reference points: the output does not move
value.data[16 + 8 * 4 + 4] += 100.0
after = attn(query, ref, value, shapes).data
print("max change after editing a distant token:", float(np.abs(after - before).max()))

# change the token under the second query: only that query's output moves
grid = reference_points(8, 8)
near = int(np.argmin(((grid - ref[1]) ** 2).sum(1)))
value.data[16 + near] += 100.0
moved = np.abs(attn(query, ref, value, shapes).data - after).max(axis=1)
print("per-query change after editing the token at (0.8, 0.8):", np.round(moved, 3))
