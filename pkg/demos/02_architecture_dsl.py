#!/usr/bin/env python3
# The architecture description language: stages of module chains with
# repetition groups, plus the named presets.

from polyres import parse_network, preset, render_network
from polyres.dsl import PRESET_NAMES

# A mixed stage interleaving three module families, repeated four times.
config = parse_network("B: (3-way -> mpoly-3 -> poly-3) x 4")
print("modules in stage B:", [m.token for m in config.stages[0].modules])

# The shorthand expands to three plain-residual stages.
baseline = parse_network("IR 3-6-3")
print("\nshorthand IR 3-6-3 ->", render_network(baseline))
for stage in baseline.stages:
    print(f"  stage {stage.name}: {len(stage.modules)} modules, "
          f"width {stage.width}, {stage.resolution}x{stage.resolution}")

# Rendering re-compresses maximal repeats, and parse(render(c)) == c.
assert parse_network(render_network(config)) == config

# Presets cover the reference configurations, all expressible in the
# public grammar.
print()
for name in PRESET_NAMES:
    p = preset(name)
    counts = "-".join(str(len(s.modules)) for s in p.stages)
    print(f"{name:<18} {counts:<10} {render_network(p)}")

# The very deep preset pairs a shared-parameter third-order module with a
# 2-way module, ten times in stage B.
deep = preset("very-deep-polynet")
print("\nstage B of very-deep-polynet:",
      [m.token for m in deep.stages[1].modules[:4]], "... x", len(deep.stages[1].modules))
