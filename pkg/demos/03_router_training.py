"""Train routers on a two-domain corpus, with and without load balancing.

Domain A sequences use bytes a..m, domain B uses n..z. Routers start skewed
toward expert 0; the load-balancing term (alpha > 0) pushes assignments back
toward an even split while plain cross-entropy training leaves the skew
alone. Run:

    python demos/03_router_training.py
"""

import tempfile
from pathlib import Path

import numpy as np

from moefuse import (
    ArchInfo,
    ExpertSpec,
    MoeConfig,
    MoeModel,
    compose,
    load_balance_loss,
    random_dense_checkpoint,
    save,
    train,
)

rng = np.random.default_rng(123)


def corpus_line(alphabet, n=10):
    return [256] + [int(c) for c in rng.choice(alphabet, size=n)] + [257]


domain_a = [ord(c) for c in "abcdefghijklm"]
domain_b = [ord(c) for c in "nopqrstuvwxyz"]
corpus = [corpus_line(domain_a) for _ in range(6)] + \
         [corpus_line(domain_b) for _ in range(6)]

work = Path(tempfile.mkdtemp(prefix="moefuse_demo_"))
arch = ArchInfo(vocab_size=258, d_model=16, n_blocks=2, n_heads=2, d_ff=24)
for i in range(2):
    save(random_dense_checkpoint(arch, seed=60 + i, scale=0.6), work / f"e{i}")

ckpt, _ = compose(MoeConfig(
    moe_method="traditional",
    experts=[ExpertSpec("e0", str(work / "e0")), ExpertSpec("e1", str(work / "e1"))],
    num_experts_per_tok=1,
    router_layers=["mlp.gate_proj", "mlp.up_proj", "mlp.down_proj"],
    seed=3,
))
model = MoeModel.from_checkpoint(ckpt)

# bias the routers toward expert 0 so there is a skew to repair
skew = np.array([0.5, 0.0])
skewed = model.replace_params({
    name: model.params[name].data + skew
    for name in model.trainable_param_names()
})


def routing_fractions(m):
    decisions = []
    for seq in corpus:
        _, trace = m.forward(seq)
        decisions.extend(trace.decisions)
    counts = np.zeros(m.num_experts)
    for d in decisions:
        counts[d.selected[0]] += 1
    return counts / counts.sum(), load_balance_loss(decisions, m.num_experts)


f0, lb0 = routing_fractions(skewed)
print(f"before training: top-1 fractions {np.round(f0, 3)}, lb loss {lb0:.3f}\n")

for alpha in (0.0, 0.01):
    trained, history = train(skewed, corpus, steps=100, lr=5.0, alpha=alpha)
    f, lb = routing_fractions(trained)
    print(f"alpha={alpha}:")
    print(f"  ce {history[0].ce:.4f} -> {history[-1].ce:.4f}")
    print(f"  top-1 fractions {np.round(f, 3)}  (max {f.max():.3f})")
    print(f"  lb loss {lb:.3f}\n")

print("alpha=0.01 ends closer to an even split: the auxiliary loss revives")
print("the starved expert instead of letting the skew harden into a dead one.")
