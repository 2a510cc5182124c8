"""The feature-consistency hinge on hand-sized feature maps.

At the locations where teacher and auto-encoder disagree most, both feature
vectors are channel-normalized and their distance D is pushed above a margin
m with max(0, m - D). Identical maps therefore cost exactly m, and m = 0
switches the term off.

    python3 demos/02_consistency_hinge.py
"""
import math

import numpy as np

from dfscad.autograd import Tensor, grad
from dfscad.losses import dfsc_loss

rng = np.random.default_rng(0)
t = rng.normal(size=(8, 4, 4))

print("identical maps:")
for m in (0.0, 0.4, 2.0):
    print(f"  m={m}: loss {float(dfsc_loss(t, t.copy(), 0.999, m).data)}")

e1 = np.array([1.0, 0.0]).reshape(2, 1, 1)
e2 = np.array([0.0, 1.0]).reshape(2, 1, 1)
loss = float(dfsc_loss(e1, e2, 0.0, 2.0).data)
print(f"orthogonal unit vectors, m=2: {loss:.6f} (2 - sqrt 2 = {2 - math.sqrt(2):.6f})")

# Start the auto-encoder output almost on top of the teacher and let gradient
# descent on A alone push the two apart until the hinge is satisfied.
a = Tensor(t + 0.05 * rng.normal(size=t.shape), requires_grad=True)
for step in range(501):
    loss = dfsc_loss(Tensor(t), a, 0.0, 0.4)
    if step % 20 == 0 or float(loss.data) < 0.004:
        print(f"  step {step:3d}: loss {float(loss.data):.5f}")
    if float(loss.data) < 0.004:
        break
    (g,) = grad(loss, [a])
    a.data = a.data - g

# With the mask applied before normalization a location that keeps a single
# channel normalizes to +-1 whatever A is, so it carries no gradient.
t1 = np.zeros((3, 1, 1))
t1[0] = 3.0
a1 = Tensor(np.array([0.5, 0.3, 0.0]).reshape(3, 1, 1), requires_grad=True)
for order in ("mask_first", "normalize_first"):
    (g,) = grad(dfsc_loss(Tensor(t1), a1, 0.99, 0.4, order=order), [a1])
    print(f"single-channel location, {order}: |grad| = {np.abs(g).sum():.4f}")
