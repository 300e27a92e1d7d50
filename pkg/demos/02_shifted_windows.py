"""Window attention and its shifted variant on an 8x8 token grid.

Prints the window layout, the attention mask of the shifted windows and
demonstrates that a token that wrapped around the border never talks to
its new neighbours.
"""

import numpy as np

from sftnet.swin import (SwinLayerParams, WindowSpec, layer_param_shapes, shifted_window_mask,
                         window_attention, window_partition)
from sftnet.tensor import Tensor

g, window, shift, c = 8, 4, 2, 4
ids = Tensor(np.arange(g * g, dtype=float).reshape(1, g * g, 1))
print("token ids per window (row-major inside each window):")
print(window_partition(ids, g, g, window).data[..., 0].astype(int))

mask = shifted_window_mask(g, g, window, shift)
for k in range(mask.shape[0]):
    blocked = int((mask[k] < 0).sum())
    print(f"shifted window {k}: {blocked} of {mask[k].size} token pairs masked")

rng = np.random.default_rng(1)
weights = {}
for name, shape, init in layer_param_shapes(c, window, 1, 2.0, True):
    weights[name] = Tensor(np.ones(shape) if init == "ones" else 0.5 * rng.standard_normal(shape))
params = SwinLayerParams(**weights)
x = rng.standard_normal((1, g * g, c))
spec = WindowSpec(window, shift, 1)
base = window_attention(Tensor(x), g, g, params, spec).data

# poke the top-left token: after the cyclic shift it sits next to the
# bottom-right corner, but the mask keeps those tokens independent
poked = x.copy()
poked[0, 0] += 10.0
moved = window_attention(Tensor(poked), g, g, params, spec).data
changed = np.nonzero(np.abs(moved - base).max(axis=-1)[0] > 0)[0]
print("tokens affected by poking token 0:", changed.tolist())
