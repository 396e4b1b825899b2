"""
Tape autodiff in a few lines
============================

Record ops on a tape, run backward, then compare with finite differences.
"""

import numpy as np

from svsec import tensor_core as tc
from svsec.nn_layers import Conv2dLayer, conv2d, maxpool2d

# a tensor only records history while a tape is open
x = tc.tensor([1.0, 2.0, 3.0], requires_grad=True)
with tc.Tape() as tape:
    loss = tc.tsum(tc.mul(x, x))
tc.backward(loss, tape)
print("d/dx sum(x^2) =", x.grad)  # [2, 4, 6]

# storage is float32; switch to float64 for numerical checks
with tc.precision(np.float64):
    rng = np.random.default_rng(0)
    conv = Conv2dLayer(tc.tensor(rng.normal(size=(4, 3, 3, 3))), tc.tensor(np.zeros(4)), 1, 1)
    img = tc.tensor(rng.normal(size=(1, 3, 8, 8)))

    def score():
        y = maxpool2d(tc.relu(conv2d(img, conv)))
        return tc.tsum(tc.mul(y, y))

    report = tc.grad_check(score, [conv.weight, conv.bias], h=1e-6, tol=1e-3)

print(f"conv + relu + pool: {report.checked} coordinates, max rel. error {report.max_rel_error:.2e}")
print("passed" if report.passed else "FAILED")
