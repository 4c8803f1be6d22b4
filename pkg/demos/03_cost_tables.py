#!/usr/bin/env python3
# Analytic cost accounting: parameters, MACs, block applications, and the
# stage x module-kind ablation grid.

from polyres import ConvBlock, DenseBlock, count_macs, count_params, lower, parse_network, preset
from polyres.cost import efficiency_table, grid_configs, rows_to_csv

# Parameter identities per module: a shared-parameter poly-3 costs the same
# parameters as a plain unit; mpoly-3 costs three times as much.
model = lower(
    parse_network("A: ir -> poly-3 -> mpoly-3", input_size=8, base_width=4),
    DenseBlock(4, 8), input_channels=1,
)
for row in count_params(model).module_rows():
    print(f"{row.kind:<8} params {row.params:>4}  block_apps {row.block_apps}")

# MACs follow the same 2/3 story: the cascaded poly-2 module costs exactly
# two thirds of its naive lowering.
cfg = parse_network("A: poly-2", input_size=8, base_width=4)
cascaded = count_macs(lower(cfg, ConvBlock(4, 2), input_channels=1)).module_rows()[0]
naive = count_macs(lower(cfg, ConvBlock(4, 2), input_channels=1, memoize=False)).module_rows()[0]
print(f"\npoly-2 module MACs: cascaded {cascaded.macs} vs naive {naive.macs} "
      f"(ratio {cascaded.macs / naive.macs:.4f})")

# Doubling every channel width (input included) quadruples conv MACs.
small = lower(parse_network("A: ir; B: ir", input_size=16, base_width=4), ConvBlock(4, 2), input_channels=2)
large = lower(parse_network("A: ir; B: ir", input_size=16, base_width=8), ConvBlock(8, 2), input_channels=4)
conv = lambda rep: sum(r.macs for r in rep.rows if r.stage != "head")
print("width doubling MAC ratio:", conv(count_macs(large)) / conv(count_macs(small)))

# The ablation grid: 3 stages x 6 module kinds over the 3-6-3 baseline,
# 18 variants plus the baseline, one cost row each.
grid = grid_configs(preset("ir-3-6-3"))
rows = efficiency_table(grid, DenseBlock(16, 32), beta=0.3, input_channels=1)
print(f"\n{len(rows)} grid rows; first five:")
print(rows_to_csv(rows[:5]))
