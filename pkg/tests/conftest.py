import numpy as np
import pytest

from moefuse import checkpoint as cp
from moefuse import composer
from moefuse.model import MoeModel, random_dense_checkpoint

TINY_ARCH = cp.ArchInfo(vocab_size=17, d_model=8, n_blocks=2, n_heads=2, d_ff=12)

ALL_FFN_SELECTORS = ["mlp.gate_proj", "mlp.up_proj", "mlp.down_proj"]


def save_expert(tmp_path, name, seed, arch=TINY_ARCH, scale=0.5):
    ckpt = random_dense_checkpoint(arch, seed=seed, scale=scale)
    out = tmp_path / name
    cp.save(ckpt, out)
    return out


def make_config(method, expert_dirs, k=2, alpha=0.0, selectors=None, indices=None,
                stitch_freq=None, seed=7, align="strict"):
    return composer.MoeConfig(
        moe_method=method,
        experts=[composer.ExpertSpec(f"expert_{i}", str(d)) for i, d in enumerate(expert_dirs)],
        num_experts_per_tok=k,
        model_type="test_model",
        router_layers=list(ALL_FFN_SELECTORS if selectors is None else selectors),
        router_layers_index=list(indices or []),
        alpha=alpha,
        stitch_freq=stitch_freq,
        seed=seed,
        align=align,
    )


@pytest.fixture
def composed_models(tmp_path):
    """Three distinct experts composed under both router methods."""
    dirs = [save_expert(tmp_path, f"e{i}", seed=10 + i) for i in range(3)]
    out = {}
    for method in ("traditional", "btx"):
        ckpt, report = composer.compose(make_config(method, dirs, k=2))
        out[method] = MoeModel.from_checkpoint(ckpt)
    return out


def random_prompt(rng, vocab, length=None):
    n = int(length if length is not None else rng.integers(1, 9))
    return [int(t) for t in rng.integers(0, vocab, size=n)]
