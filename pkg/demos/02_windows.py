"""
Windows, shifts and the attention mask
======================================

A 4x4 token grid with 2x2 windows, shifted by one token.
"""

import numpy as np

from svsec import tensor_core as tc
from svsec.swin import cyclic_shift, shifted_window_mask, window_partition

grid = tc.tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1))
print("token ids\n", grid.data[0, :, :, 0].astype(int))

windows = window_partition(grid, 2)
print("window 3 holds tokens", windows.data[3, :, 0].astype(int))

shifted = cyclic_shift(grid, 1)
print("after a shift of 1\n", shifted.data[0, :, :, 0].astype(int))

# tokens that wrapped around the border must not see their new neighbours
mask = shifted_window_mask(4, 4, 2, 1)
for w in range(4):
    allowed = (mask[w] == 0).astype(int)
    print(f"window {w}: {allowed.sum()} of 16 pairs allowed")
print("window 0 pattern\n", (mask[0] == 0).astype(int))
