"""Walk through one multi-head self-attention layer on a tiny feature map.

The vectorised layer on a 3x3 map with 8 channels is compared position by
position against a plain-Python evaluation. Then the demo zeroes the
relative tables and shows the layer falls back to content-only attention.

    python demos/attention_walkthrough.py
"""

import numpy as np

from botkit.attention import MhsaConfig, MhsaLayer, mhsa2d_forward, relative_offset_index
from botkit.oracles import layer_brute_force
from botkit.tensor import Tensor, no_grad

rng = np.random.default_rng(0)
layer = MhsaLayer(MhsaConfig(d_model=8, heads=2), height=3, width=3, rng=rng)
fmap = rng.normal(size=(1, 8, 3, 3))

print("heads", layer.config.heads, "d_head", layer.config.d_head)
print("R_h rows", layer.rh.shape[0], "R_w rows", layer.rw.shape[0])  # 2H-1, 2W-1

dh, dw = relative_offset_index(3, 3)
print("row-offset table index for query 0 (top-left):", dh[0])

with no_grad():
    out, tr = mhsa2d_forward(Tensor(fmap), layer, trace=True)
ref = layer_brute_force(fmap, layer)
print("max |vectorised - brute force|: %.2e" % np.max(np.abs(out.data - ref)))
print("attention rows sum to 1:", np.allclose(tr.weights.sum(-1), 1.0))

# no positions -> pure content attention
layer.rh.data[:] = 0
layer.rw.data[:] = 0
with no_grad():
    out0 = mhsa2d_forward(Tensor(fmap), layer).data
ref0 = layer_brute_force(fmap, layer, use_positions=False)
print("zero tables vs content-only: %.2e" % np.max(np.abs(out0 - ref0)))
