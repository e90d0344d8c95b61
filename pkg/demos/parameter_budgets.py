"""
Parameter budgets of DxNet and DenseNet classifiers
===================================================

Counts are derived from the layer topology, so nothing is allocated.
"""

from dxnet.blocks import XUnitSpec
from dxnet.model import NetConfig, count_table, param_count

# an xUnit over k channels: the 9x9 depthwise filter plus its bias
for k in (12, 32, 64):
    print(f"xUnit k={k}: formula {param_count(XUnitSpec(k), 'paper_formula')}, stored {param_count(XUnitSpec(k))}")

dxnet = NetConfig(blocks=(12, 12, 12), growth=12, reduction=0.5)
densenet = NetConfig(blocks=(16, 16, 16), growth=12, xunit=False)

for name, cfg in (("DxNet 12-12-12", dxnet), ("DenseNet 16-16-16", densenet)):
    print(f"\n{name}")
    for group, n in count_table(cfg):
        print(f"  {group:8s} {n:9d}")
    print(f"  total    {param_count(cfg):9d}")
