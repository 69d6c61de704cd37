import json

import numpy as np
import pytest

from moefuse import checkpoint as cp
from moefuse import composer
from moefuse.composer import MoeConfig, compose, selector_match, validate
from moefuse.errors import ConfigError, MissingExpert, ShapeMismatch
from moefuse.tensor import Tensor

from conftest import ALL_FFN_SELECTORS, TINY_ARCH, make_config, save_expert

# config JSON in the shape every composition run consumes: three experts,
# per-projection routing, two active per token, balancing off
EXAMPLE_CONFIG = {
    "moe_method": "btx",
    "stitch_freq": 5,
    "model_type": "new_model_type",
    "num_experts_per_tok": 2,
    "experts": [
        {"expert_name": "base_expert", "model_id": "expert_base_checkpoint"},
        {"expert_name": "expert_1", "model_id": "expert_1_checkpoint"},
        {"expert_name": "expert_2", "model_id": "expert_2_checkpoint"},
    ],
    "router_layers": ["mlp.gate_proj", "mlp.up_proj", "mlp.down_proj"],
    "alpha": 0,
    "router_layers_index": [],
}


def test_example_config_validates_clean():
    cfg = MoeConfig.from_dict(EXAMPLE_CONFIG)
    assert validate(cfg) == []


def test_too_many_active_experts_diagnosed():
    cfg = MoeConfig.from_dict({**EXAMPLE_CONFIG, "num_experts_per_tok": 4})
    diags = validate(cfg)
    assert len(diags) == 1 and diags[0].field == "num_experts_per_tok"


def test_bts_without_stitch_freq_diagnosed():
    raw = {**EXAMPLE_CONFIG, "moe_method": "bts"}
    del raw["stitch_freq"]
    diags = validate(MoeConfig.from_dict(raw))
    assert len(diags) == 1 and diags[0].field == "stitch_freq"


def test_selector_match_examples():
    assert selector_match("blocks.2.mlp.gate_proj.weight", ["mlp.gate_proj"], []) == (2, "gate")
    assert selector_match("blocks.2.mlp.gate_proj.weight", ["mlp.gate_proj"], [0, 1]) is None
    assert selector_match("blocks.2.attn.q_proj.weight", ["mlp.gate_proj"], []) is None


def test_selector_match_wildcard_and_non_block():
    assert selector_match("blocks.1.mlp.up_proj.weight", ["mlp.*"], []) == (1, "mlp.*")
    assert selector_match("embed.weight", ["mlp.gate_proj"], []) is None


def test_identical_experts_compose_to_source(tmp_path):
    src_dir = save_expert(tmp_path, "src", seed=3)
    source = cp.load(src_dir)
    cfg = make_config("btx", [src_dir, src_dir, src_dir], k=2)
    ckpt, report = compose(cfg)
    for name in report.shared_param_names:
        np.testing.assert_allclose(
            ckpt.tensors[name].data, source.tensors[name].data, atol=1e-12)
    for name in report.expert_param_names:
        base = name.split(".experts.expert_")[0] + ".weight"
        np.testing.assert_array_equal(ckpt.tensors[name].data, source.tensors[base].data)


def test_mean_of_two_tensors(tmp_path):
    arch = cp.ArchInfo(vocab_size=TINY_ARCH.vocab_size, d_model=2, n_blocks=1,
                       n_heads=1, d_ff=2)
    from moefuse.model import dense_param_shapes

    shapes = dense_param_shapes(arch)
    rng = np.random.default_rng(0)
    base = {n: Tensor(rng.normal(size=s), name=n) for n, s in shapes.items()}
    t_a = dict(base)
    t_b = dict(base)
    t_a["blocks.0.attn.q_proj.weight"] = Tensor([[1.0, 2.0], [3.0, 4.0]])
    t_b["blocks.0.attn.q_proj.weight"] = Tensor([[3.0, 2.0], [1.0, 0.0]])
    cp.save(cp.build_checkpoint("dense", arch, t_a), tmp_path / "ma")
    cp.save(cp.build_checkpoint("dense", arch, t_b), tmp_path / "mb")
    cfg = make_config("btx", [tmp_path / "ma", tmp_path / "mb"], k=1)
    ckpt, _ = compose(cfg)
    assert ckpt.tensors["blocks.0.attn.q_proj.weight"].data.tolist() == [[2.0, 2.0], [2.0, 2.0]]


def test_example_config_composes_with_manifest_echo(tmp_path):
    for i, spec in enumerate(EXAMPLE_CONFIG["experts"]):
        save_expert(tmp_path, spec["model_id"], seed=20 + i)
    cfg = MoeConfig.from_dict(EXAMPLE_CONFIG)
    ckpt, _ = compose(cfg, base_dir=tmp_path)
    moe = ckpt.manifest.moe
    assert moe.num_experts == 3
    assert moe.num_experts_per_tok == 2
    assert moe.alpha == 0.0
    assert ckpt.manifest.model_kind == "btx"
    assert moe.expert_names == ("base_expert", "expert_1", "expert_2")


def test_coverage_accounting(tmp_path):
    dirs = [save_expert(tmp_path, f"e{i}", seed=30 + i) for i in range(3)]
    ckpt, report = compose(make_config("btx", dirs, k=2))
    names = set(ckpt.tensors)
    shared = set(report.shared_param_names)
    expert = set(report.expert_param_names)
    new = set(report.new_param_names)
    assert shared | expert | new == names
    assert not (shared & expert) and not (shared & new) and not (expert & new)
    # every converted parameter appears once per expert
    converted = TINY_ARCH.n_blocks * 3
    assert len(expert) == 3 * converted
    assert len(new) == TINY_ARCH.n_blocks * 3  # one router per (block, projection)


def test_traditional_router_per_block(tmp_path):
    dirs = [save_expert(tmp_path, f"e{i}", seed=40 + i) for i in range(3)]
    ckpt, report = compose(make_config("traditional", dirs, k=2))
    assert sorted(report.new_param_names) == [
        f"blocks.{i}.router.weight" for i in range(TINY_ARCH.n_blocks)
    ]
    for name in report.new_param_names:
        assert ckpt.tensors[name].shape == (TINY_ARCH.d_model, 3)


def test_block_index_filter_limits_conversion(tmp_path):
    dirs = [save_expert(tmp_path, f"e{i}", seed=50 + i) for i in range(2)]
    ckpt, report = compose(make_config("btx", dirs, k=1, indices=[0]))
    assert all(".experts.expert_" not in n or n.startswith("blocks.0.")
               for n in report.expert_param_names)
    assert "blocks.1.mlp.gate_proj.weight" in report.shared_param_names


def test_order_independence_of_averages(tmp_path):
    dirs = [save_expert(tmp_path, f"e{i}", seed=60 + i) for i in range(3)]
    c1, r1 = compose(make_config("btx", dirs, k=2))
    c2, r2 = compose(make_config("btx", list(reversed(dirs)), k=2))
    for name in r1.shared_param_names:
        np.testing.assert_allclose(
            c1.tensors[name].data, c2.tensors[name].data, atol=1e-12)


def test_compose_determinism(tmp_path):
    dirs = [save_expert(tmp_path, f"e{i}", seed=70 + i) for i in range(3)]
    cfg = make_config("btx", dirs, k=2, seed=99)
    ckpt1, _ = compose(cfg)
    ckpt2, _ = compose(cfg)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    cp.save(ckpt1, out1)
    cp.save(ckpt2, out2)
    assert (out1 / "tensors.bin").read_bytes() == (out2 / "tensors.bin").read_bytes()
    assert (out1 / "manifest.json").read_bytes() == (out2 / "manifest.json").read_bytes()


def test_shape_mismatch_strict_vs_truncate(tmp_path):
    arch_small = cp.ArchInfo(vocab_size=17, d_model=8, n_blocks=2, n_heads=2, d_ff=10)
    d_a = save_expert(tmp_path, "a", seed=1)
    d_b = save_expert(tmp_path, "b", seed=2, arch=arch_small)
    with pytest.raises(ShapeMismatch):
        compose(make_config("btx", [d_a, d_b], k=1))
    ckpt, report = compose(make_config("btx", [d_a, d_b], k=1, align="truncate_to_min"))
    assert ckpt.manifest.arch.d_ff == 12  # first expert wins the output shape
    assert any(a["policy_applied"] == "truncate_to_min" for a in report.alignment_actions)
    # averaged region is the overlap; the tail keeps expert 0's values
    a_ck, b_ck = cp.load(d_a), cp.load(d_b)
    name = "blocks.0.mlp.gate_proj.experts.expert_1.weight"
    got = ckpt.tensors[name].data
    np.testing.assert_allclose(got[:, :10], b_ck.tensors["blocks.0.mlp.gate_proj.weight"].data,
                               atol=1e-12)
    np.testing.assert_allclose(got[:, 10:],
                               a_ck.tensors["blocks.0.mlp.gate_proj.weight"].data[:, 10:],
                               atol=1e-12)


def test_missing_expert(tmp_path):
    cfg = make_config("btx", [tmp_path / "nope", tmp_path / "nada"], k=1)
    with pytest.raises(MissingExpert):
        compose(cfg)


def test_invalid_config_raises_config_error(tmp_path):
    dirs = [save_expert(tmp_path, "a", seed=1)]
    cfg = make_config("mystery", dirs, k=1)
    with pytest.raises(ConfigError) as exc:
        compose(cfg)
    assert any(d.field == "moe_method" for d in exc.value.diagnostics)


def test_out_of_range_block_index_rejected(tmp_path):
    dirs = [save_expert(tmp_path, f"e{i}", seed=80 + i) for i in range(2)]
    with pytest.raises(ConfigError):
        compose(make_config("btx", dirs, k=1, indices=[5]))


def test_attn_selectors_accepted_but_skipped(tmp_path):
    dirs = [save_expert(tmp_path, f"e{i}", seed=90 + i) for i in range(2)]
    cfg = make_config("btx", dirs, k=1,
                      selectors=["mlp.gate_proj", "attn.q_proj"])
    assert validate(cfg) == []
    ckpt, report = compose(cfg)
    assert "blocks.0.attn.q_proj.weight" in report.shared_param_names
    assert any("attn.q_proj" in s for s in report.skipped_selectors)


def test_bts_embeds_experts_whole(tmp_path):
    dirs = [save_expert(tmp_path, f"e{i}", seed=100 + i) for i in range(3)]
    cfg = make_config("bts", dirs, k=1, stitch_freq=1)
    ckpt, report = compose(cfg)
    src = cp.load(dirs[0])
    for name, t in src.tensors.items():
        np.testing.assert_array_equal(ckpt.tensors[f"hub.{name}"].data, t.data)
    src1 = cp.load(dirs[1])
    for name, t in src1.tensors.items():
        np.testing.assert_array_equal(ckpt.tensors[f"experts.expert_0.{name}"].data, t.data)
    assert report.shared_param_names == []
    assert ckpt.manifest.moe.num_experts == 2
    assert all(n.startswith("stitch.") for n in report.new_param_names)
