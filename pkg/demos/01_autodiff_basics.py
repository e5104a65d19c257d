"""
Gradients on a dynamic tape
===========================

Build a small graph, run one backward pass and compare the result with
central finite differences.
"""

import numpy as np

import skthdr.autodiff as ad
from skthdr.errors import GraphConsumed

rng = np.random.default_rng(0)
x = ad.Tensor(rng.uniform(0.1, 1.0, size=(2, 3)), requires_grad=True)

# mu-law compression followed by a mean: the same shape of graph the
# tonemapped losses use
y = ad.log1p(x * 5000.0) / np.log1p(5000.0)
loss = ad.square(y).mean()
loss.backward()
print("loss", loss.item())
print("analytic grad\n", x.grad)

# gradcheck returns the worst relative error between the tape and finite differences
err = ad.gradcheck(lambda t: ad.square(ad.log1p(t * 5000.0) / np.log1p(5000.0)).mean(), x)
print("max relative error", err)

# a graph is consumed by backward unless asked to keep it
z = ad.exp(x).sum()
z.backward(retain_graph=True)
z.backward()
try:
    z.backward()
except GraphConsumed as exc:
    print("third backward refused:", exc)

# the registered checks cover every differentiable building block
from skthdr.gradchecks import format_table, gradcheck_suite

print(format_table(gradcheck_suite(["conv2d", "soft_histogram", "prior_fusion_block", "skam"])))
