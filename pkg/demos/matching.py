"""How predictions are paired with ground truth before the loss is taken.

Three queries predict masks over a 4 x 4 grid; two text regions are annotated.
The matcher builds a cost for every (query, region) pair and solves the
assignment; the leftover query is trained towards "no text".

    python demos/matching.py
"""
import numpy as np

from attrdet.decoder import StageOutput
from attrdet.loss import LossConfig, assign, matching_cost, stage_loss
from attrdet.tensor import Tensor

gt = np.zeros((2, 16), dtype=bool)
gt[0, [0, 1, 4, 5]] = True      # top-left block
gt[1, [10, 11, 14, 15]] = True  # bottom-right block

logits = np.full((3, 16), -4.0)
logits[0, [10, 11, 14, 15]] = 4.0  # query 0 found the bottom-right block
logits[1, [0, 1, 4]] = 4.0         # query 1 covers most of the top-left one
logits[2, :8] = 1.0                # query 2 is a vague top-half blob
class_logits = np.array([2.0, 1.0, 0.0])

cfg = LossConfig(points_k=16)
cost = matching_cost(logits, class_logits, gt, np.arange(16), cfg)
print("cost (rows: queries, cols: regions)")
print(np.round(cost, 2))

match = assign(cost)
print("pairs:", match.pairs, " unmatched:", match.unmatched)

stage = StageOutput(Tensor(logits), Tensor(class_logits))
total, terms = stage_loss(stage, gt, np.random.default_rng(0), cfg)
print("loss terms:", {k: round(v, 4) for k, v in terms.items()}, " total:", round(float(total.data), 4))
