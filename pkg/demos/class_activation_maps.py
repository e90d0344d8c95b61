"""
Class activation maps of a GAP classifier
=========================================

The logit of class c equals the spatial mean of its activation map plus the
class bias, because pooling and the linear layer commute.
"""

import numpy as np

from dxnet.data import synthetic_images
from dxnet.model import NetConfig, build_model
from dxnet.probe import cam

model = build_model(NetConfig(blocks=(2, 2), growth=6, num_classes=4), 0)
img = synthetic_images(1, 32, 3, np.random.default_rng(1))[0]

for c in range(4):
    res = cam(model, img, c)
    print(f"class {c}: logit {res.logit:+.5f}  map mean + bias - logit = {res.residual:+.2e}  map {res.map.shape}")

# coarse text rendering of the overlay for class 0
heat = cam(model, img, 0).overlay[::4, ::4]
for row in heat:
    print("".join(" .:-=+*#"[min(int(v * 8), 7)] for v in row))
