"""Trace which experts each token uses, and aggregate per-token weights.

Every routed site (block, projection) emits one decision per token. The
aggregate over sites is the per-token expert profile the visualizer colors
by. Run:

    python demos/02_route_tracing.py
"""

import tempfile
from pathlib import Path

from moefuse import (
    ArchInfo,
    ByteTokenizer,
    ExpertSpec,
    MoeConfig,
    MoeModel,
    aggregate,
    compose,
    expert_utilization,
    random_dense_checkpoint,
    save,
)

work = Path(tempfile.mkdtemp(prefix="moefuse_demo_"))
arch = ArchInfo(vocab_size=258, d_model=16, n_blocks=2, n_heads=2, d_ff=32)
for i in range(3):
    save(random_dense_checkpoint(arch, seed=40 + i, scale=0.6), work / f"e{i}")

ckpt, _ = compose(MoeConfig(
    moe_method="btx",
    experts=[ExpertSpec(n, str(work / d)) for n, d in
             [("base", "e0"), ("alpha", "e1"), ("beta", "e2")]],
    num_experts_per_tok=2,
    router_layers=["mlp.gate_proj", "mlp.up_proj", "mlp.down_proj"],
    seed=1,
))
model = MoeModel.from_checkpoint(ckpt)

tok = ByteTokenizer()
prompt = "hello experts"
ids = tok.encode(prompt)
logits, trace = model.forward(ids, label_fn=tok.token_label)

print(f"prompt: {prompt!r} -> {len(ids)} tokens, "
      f"{len(trace.decisions)} routing decisions "
      f"({len(model.routed_blocks)} blocks x 3 projections per token)\n")

# Raw decisions for the first token
first = [d for d in trace.decisions if d.token_index == 0]
print("token 0 decisions:")
for d in first:
    picks = ", ".join(f"e{e}:{w:.2f}" for e, w in zip(d.selected, d.weights))
    print(f"  block {d.block} {d.projection:>4}: {picks}")

# Aggregated view: mean weight per expert over all sites, dominant = argmax
print("\nper-token aggregates (all sites):")
names = trace.expert_names
for summary in aggregate(trace):
    text = trace.tokens[summary.token_index].text
    weights = " ".join(f"{names[e]}={w:.3f}" for e, w in enumerate(summary.weights))
    print(f"  {text!r:>8} -> dominant {names[summary.dominant]:>5}  ({weights})")

# Restricting to one projection changes the picture
print("\nsame tokens, gate projection only:")
for summary in aggregate(trace, projections=["gate"]):
    text = trace.tokens[summary.token_index].text
    print(f"  {text!r:>8} -> dominant {names[summary.dominant]:>5} "
          f"over {summary.site_count} sites")

util = expert_utilization(trace)
print("\nutilization:",
      {n: round(float(f), 3) for n, f in zip(names, util["top1_fraction"])})
if util["collapse"]["collapsed"]:
    print("warning: routing collapse detected")
