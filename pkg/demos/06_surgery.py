#!/usr/bin/env python3
# Initialization by insertion: grow a trained model without forgetting.
#
# Upgrading swaps module kinds in place, keeping every block that already
# existed (the first-order block F in particular) and freshly initializing
# only the inserted ones. With zero_last the new blocks' final layers start
# at zero, so the grown network computes the same function at insertion.

import numpy as np

from polyres import DenseBlock, deepen_interleave, lower, parse_network, upgrade

source = lower(
    parse_network("A: ir -> ir; B: ir", input_size=8, classes=3, base_width=4),
    DenseBlock(4, 8), beta=0.3, seed=5, precision="f64", input_channels=1,
)
x = np.random.default_rng(2).standard_normal((4, 1, 8, 8))
before = source.logits(x)

# ir -> mpoly-2 upgrades: F is retained bitwise, G is new.
target = parse_network("A: mpoly-2 -> 2-way; B: mpoly-3", input_size=8, classes=3, base_width=4)
grown = upgrade(source, target, zero_last=True, seed=6)
print("upgraded config:", grown.meta.config_text)
print("F retained bitwise:",
      np.array_equal(grown.params.get("A.0.F", "w1"), source.params.get("A.0.F", "w1")))
print("max output change:", np.abs(grown.logits(x) - before).max())

# Interleaved deepening doubles a stage by inserting new units between the
# originals (old, new, old, new, ...), again function-preserving.
deeper = deepen_interleave(source, per_stage_new=[2, 1], zero_last=True, seed=7)
print("\ndeepened config:", deeper.meta.config_text)
print("module order:", [m.segment for m in deeper.modules])
print("max output change:", np.abs(deeper.logits(x) - before).max())

# Without zero_last the new paths start random, matching the plain
# "randomly initialize the inserted block" recipe.
noisy = upgrade(source, target, zero_last=False, seed=8)
print("\nwithout zero_last, outputs move:", np.abs(noisy.logits(x) - before).max() > 1e-3)
