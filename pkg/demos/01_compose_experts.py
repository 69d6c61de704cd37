"""Compose three dense checkpoints into one routed MoE model.

Walks the whole merge pipeline: seed a few toy experts, write the JSON
config, run the composer, and look at what landed in the output checkpoint.
Run from the repo root:

    python demos/01_compose_experts.py
"""

import json
import tempfile
from pathlib import Path

from moefuse import (
    ArchInfo,
    MoeConfig,
    MoeModel,
    compose,
    load,
    random_dense_checkpoint,
    save,
)

work = Path(tempfile.mkdtemp(prefix="moefuse_demo_"))
print(f"working in {work}\n")

# Three "experts": same architecture, different seeds. In a real run these
# would be checkpoints fine-tuned on different data slices.
arch = ArchInfo(vocab_size=258, d_model=16, n_blocks=2, n_heads=2, d_ff=32)
for i in range(3):
    save(random_dense_checkpoint(arch, seed=100 + i, scale=0.6), work / f"expert{i}")
    print(f"expert{i}: seeded dense checkpoint at {work / f'expert{i}'}")

# The config document drives everything: which method, which submodules get
# routed, how many experts fire per token.
config = {
    "moe_method": "btx",
    "model_type": "demo_btx",
    "num_experts_per_tok": 2,
    "experts": [
        {"expert_name": "base", "model_id": str(work / "expert0")},
        {"expert_name": "arabic", "model_id": str(work / "expert1")},
        {"expert_name": "latin", "model_id": str(work / "expert2")},
    ],
    "router_layers": ["mlp.gate_proj", "mlp.up_proj", "mlp.down_proj"],
    "router_layers_index": [],
    "alpha": 0.0,
    "seed": 7,
}
(work / "config.json").write_text(json.dumps(config, indent=2))

ckpt, report = compose(MoeConfig.from_file(work / "config.json"),
                       base_dir=work)
save(ckpt, work / "moe")

print("\ncomposition report:")
print(f"  shared (averaged) tensors: {len(report.shared_param_names)}")
print(f"  expert-namespaced tensors: {len(report.expert_param_names)}")
print(f"  fresh routers:             {len(report.new_param_names)}")
for name in report.new_param_names[:3]:
    print(f"    {name}")

# Shared parameters are elementwise means; converted projections live under
# experts.expert_<i> namespaces.
print("\na few tensor names from the composed checkpoint:")
for name in list(sorted(ckpt.tensors))[:6]:
    print(f"  {name}  {ckpt.tensors[name].shape}")

moe = MoeModel.from_checkpoint(load(work / "moe"))
print(f"\nloaded back: mode={moe.mode}, {moe.num_experts} experts, "
      f"top-{moe.k} per token, routed blocks {moe.routed_blocks}")
