"""
Soft histograms and the colour loss
===================================

Kernel density histograms are differentiable in the pixel values.  Their
cumulative sums give a distribution distance that also works per region.
"""

import numpy as np

from skthdr.autodiff import Tensor
from skthdr.histogram import HistogramSpec, histogram_loss, semantic_histogram_loss, soft_histogram

rng = np.random.default_rng(1)
spec = HistogramSpec(n_bins=16, min=0.0, max=255.0, sigma=20.0)

dark = rng.uniform(0, 100, size=(3, 16, 16))
bright = rng.uniform(150, 255, size=(3, 16, 16))

h = soft_histogram(dark, spec).hist.data
print("rows sum to one:", h.sum(axis=1))
print("mass in lower half of the range:", h[:, :8].sum(axis=1))

# a shuffled copy has exactly the same histogram, so the loss is zero
shuffled = rng.permutation(dark.reshape(3, -1), axis=1).reshape(dark.shape)
print("permuted copy:", histogram_loss(dark, shuffled, spec).item())
print("dark vs bright:", histogram_loss(dark, bright, spec).item())

# gradients pull the student's distribution toward the reference
student = Tensor(dark.copy(), requires_grad=True)
histogram_loss(student, bright, spec).backward()
print("mean gradient sign (negative means push values up):", np.sign(student.grad.mean()))

# region-wise version: two masks that split the frame in half
masks = np.zeros((2, 16, 16))
masks[0, :, :8] = 1
masks[1, :, 8:] = 1
mixed = dark.copy()
mixed[:, :, 8:] = bright[:, :, 8:]
print("left half agrees, right half differs:",
      semantic_histogram_loss(dark, mixed, masks, spec).item())
