"""Merge N dense expert checkpoints into one unified MoE checkpoint.

For router-based methods (traditional, btx) every parameter either

* matches a ``router_layers`` selector at a selected block, in which case the
  per-expert tensors are kept under ``...experts.expert_<i>...`` namespaces
  and a fresh router is initialized for the site, or
* is shared: a single tensor equal to the elementwise mean over all experts.

For bts nothing is averaged or converted: every expert checkpoint is embedded
whole under ``hub.*`` / ``experts.expert_<i>.*`` and trainable stitch tensors
are added (see stitch.py).

The configuration document mirrors the JSON shape shown in the README, so a
config file is the single source of truth for a composition run.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as cp
from . import stitch as stitch_mod
from .errors import ConfigError, MissingExpert, ShapeMismatch
from .tensor import Tensor

ROUTER_INIT_STD = 0.02
FFN_PROJECTION_TAGS = {"gate_proj": "gate", "up_proj": "up", "down_proj": "down"}
ALIGN_POLICIES = ("strict", "truncate_to_min")

_BLOCK_NAME_RE = re.compile(r"^blocks\.(\d+)\.(.+)$")


@dataclass(frozen=True)
class ExpertSpec:
    expert_name: str
    model_id: str


@dataclass
class MoeConfig:
    """User-facing composition document; field names match the JSON config."""

    moe_method: str
    experts: list[ExpertSpec]
    num_experts_per_tok: int = 1
    model_type: str = "moe_model"
    router_layers: list[str] = field(default_factory=list)
    router_layers_index: list[int] = field(default_factory=list)
    alpha: float = 0.0
    stitch_freq: int | None = None
    seed: int = 0
    align: str = "strict"

    @classmethod
    def from_dict(cls, d: dict) -> "MoeConfig":
        experts = [
            ExpertSpec(expert_name=str(e.get("expert_name", f"expert_{i}")),
                       model_id=str(e.get("model_id", "")))
            for i, e in enumerate(d.get("experts", []))
        ]
        return cls(
            moe_method=str(d.get("moe_method", "")),
            experts=experts,
            num_experts_per_tok=d.get("num_experts_per_tok", 1),
            model_type=str(d.get("model_type", "moe_model")),
            router_layers=[str(s) for s in d.get("router_layers", [])],
            router_layers_index=list(d.get("router_layers_index", [])),
            alpha=d.get("alpha", 0.0),
            stitch_freq=d.get("stitch_freq"),
            seed=int(d.get("seed", 0)),
            align=str(d.get("align", "strict")),
        )

    @classmethod
    def from_file(cls, path) -> "MoeConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = {
            "moe_method": self.moe_method,
            "model_type": self.model_type,
            "num_experts_per_tok": self.num_experts_per_tok,
            "experts": [
                {"expert_name": e.expert_name, "model_id": e.model_id} for e in self.experts
            ],
            "router_layers": list(self.router_layers),
            "router_layers_index": list(self.router_layers_index),
            "alpha": self.alpha,
            "seed": self.seed,
            "align": self.align,
        }
        if self.stitch_freq is not None:
            d["stitch_freq"] = self.stitch_freq
        return d


@dataclass(frozen=True)
class Diagnostic:
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


@dataclass
class CompositionReport:
    """Audit trail: where every output tensor came from."""

    shared_param_names: list[str] = field(default_factory=list)
    expert_param_names: list[str] = field(default_factory=list)
    new_param_names: list[str] = field(default_factory=list)
    alignment_actions: list[dict] = field(default_factory=list)
    skipped_selectors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "shared_param_names": self.shared_param_names,
            "expert_param_names": self.expert_param_names,
            "new_param_names": self.new_param_names,
            "alignment_actions": self.alignment_actions,
            "skipped_selectors": self.skipped_selectors,
        }


def validate(config: MoeConfig) -> list[Diagnostic]:
    """Structural checks only; returns diagnostics instead of raising."""
    diags = []
    if config.moe_method not in ("traditional", "btx", "bts"):
        diags.append(Diagnostic("moe_method", f"unknown method {config.moe_method!r}"))
    if not config.experts:
        diags.append(Diagnostic("experts", "at least one expert is required"))
    names = [e.expert_name for e in config.experts]
    if len(set(names)) != len(names):
        diags.append(Diagnostic("experts", "expert_name values must be unique"))
    if not isinstance(config.num_experts_per_tok, int) or config.num_experts_per_tok < 1:
        diags.append(Diagnostic("num_experts_per_tok", "must be an integer >= 1"))
    elif config.experts and config.num_experts_per_tok > len(config.experts):
        diags.append(Diagnostic(
            "num_experts_per_tok",
            f"{config.num_experts_per_tok} exceeds the {len(config.experts)} experts",
        ))
    if not isinstance(config.alpha, (int, float)) or config.alpha < 0:
        diags.append(Diagnostic("alpha", "must be a number >= 0"))
    if config.moe_method == "bts":
        if config.stitch_freq is None:
            diags.append(Diagnostic("stitch_freq", "required for bts"))
        elif not isinstance(config.stitch_freq, int) or config.stitch_freq < 1:
            diags.append(Diagnostic("stitch_freq", "must be an integer >= 1"))
        if len(config.experts) < 2:
            diags.append(Diagnostic("experts", "bts needs the hub plus at least one expert"))
    else:
        if not config.router_layers:
            diags.append(Diagnostic("router_layers", "router-based methods need selectors"))
    for i, idx in enumerate(config.router_layers_index):
        if not isinstance(idx, int) or idx < 0:
            diags.append(Diagnostic(f"router_layers_index[{i}]", "must be an integer >= 0"))
    if config.align not in ALIGN_POLICIES:
        diags.append(Diagnostic("align", f"must be one of {ALIGN_POLICIES}"))
    return diags


def _selector_regex(selector: str) -> re.Pattern:
    parts = [re.escape(p) if p != "*" else r"[^.]+" for p in selector.split(".")]
    return re.compile(r"(?:^|\.)" + r"\.".join(parts) + r"(?:\.|$)")


def selector_match(name: str, selectors, indices) -> tuple[int, str] | None:
    """Match a canonical parameter name against the config selectors.

    Returns (block index, projection tag) when a selector matches at a block
    included in ``indices`` (empty = all blocks), else None.
    """
    m = _BLOCK_NAME_RE.match(name)
    if not m:
        return None
    block = int(m.group(1))
    rest = m.group(2)
    if indices and block not in set(int(i) for i in indices):
        return None
    for sel in selectors:
        if _selector_regex(sel).search(rest):
            tag = FFN_PROJECTION_TAGS.get(sel.split(".")[-1], sel)
            return block, tag
    return None


def _namespaced(name: str, expert_index: int) -> str:
    head, leaf = name.rsplit(".", 1)
    return f"{head}.experts.expert_{expert_index}.{leaf}"


def _router_name(param_name: str, method: str) -> str:
    if method == "traditional":
        block = _BLOCK_NAME_RE.match(param_name).group(1)
        return f"blocks.{block}.router.weight"
    head, _ = param_name.rsplit(".", 1)
    return f"{head}.router.weight"


def _aligned_mean(name: str, tensors: list[np.ndarray], policy: str,
                  actions: list[dict]) -> np.ndarray:
    shapes = {t.shape for t in tensors}
    if len(shapes) == 1:
        out = tensors[0].copy()
        for t in tensors[1:]:
            out += t
        return out / len(tensors)
    if policy == "strict":
        raise ShapeMismatch(f"{name}: expert shapes differ {sorted(shapes)}")
    target = tensors[0].shape
    overlap = tuple(min(t.shape[i] for t in tensors) for i in range(len(target)))
    out = tensors[0].copy()
    region = tuple(slice(0, s) for s in overlap)
    acc = np.zeros(overlap)
    for t in tensors:
        acc += t[region]
    out[region] = acc / len(tensors)
    actions.append({"name": name, "policy_applied": "truncate_to_min",
                    "target_shape": list(target), "overlap_shape": list(overlap)})
    return out


def _aligned_copy(name: str, base: np.ndarray, other: np.ndarray, policy: str,
                  actions: list[dict]) -> np.ndarray:
    if base.shape == other.shape:
        return other
    if policy == "strict":
        raise ShapeMismatch(f"{name}: shape {other.shape} vs {base.shape}")
    overlap = tuple(min(a, b) for a, b in zip(base.shape, other.shape))
    region = tuple(slice(0, s) for s in overlap)
    out = base.copy()
    out[region] = other[region]
    actions.append({"name": name, "policy_applied": "truncate_to_min",
                    "target_shape": list(base.shape), "overlap_shape": list(overlap)})
    return out


def _load_experts(config: MoeConfig, base_dir) -> list[cp.Checkpoint]:
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    loaded = []
    for spec in config.experts:
        path = Path(spec.model_id)
        if not path.is_absolute():
            path = base / path
        try:
            ckpt = cp.load(path)
        except Exception as exc:
            raise MissingExpert(f"expert {spec.expert_name!r} at {path}: {exc}") from exc
        loaded.append(ckpt)
    return loaded


def _check_compatible(config: MoeConfig, experts: list[cp.Checkpoint]) -> None:
    diags = []
    for spec, ckpt in zip(config.experts, experts):
        if ckpt.manifest.model_kind != "dense":
            diags.append(Diagnostic(
                "experts", f"{spec.expert_name}: expected a dense checkpoint, "
                           f"got {ckpt.manifest.model_kind}"))
    base = experts[0].manifest.arch
    for spec, ckpt in zip(config.experts[1:], experts[1:]):
        a = ckpt.manifest.arch
        if (a.vocab_size, a.n_blocks) != (base.vocab_size, base.n_blocks):
            diags.append(Diagnostic(
                "experts", f"{spec.expert_name}: vocab/n_blocks differ from the base"))
        if config.moe_method != "bts" and a.n_heads != base.n_heads:
            diags.append(Diagnostic(
                "experts", f"{spec.expert_name}: n_heads differ from the base"))
    for i, idx in enumerate(config.router_layers_index):
        if idx >= base.n_blocks:
            diags.append(Diagnostic(
                f"router_layers_index[{i}]", f"block {idx} >= n_blocks {base.n_blocks}"))
    if diags:
        raise ConfigError(diags)


def _compose_routed(config: MoeConfig, experts: list[cp.Checkpoint]):
    arch = experts[0].manifest.arch
    names = sorted(experts[0].tensors)
    for spec, ckpt in zip(config.experts[1:], experts[1:]):
        if sorted(ckpt.tensors) != names:
            raise ConfigError([Diagnostic(
                "experts", f"{spec.expert_name}: parameter names differ from the base")])
    report = CompositionReport()
    out: dict[str, Tensor] = {}
    router_sites: list[str] = []
    seen_selectors: set[str] = set()
    for name in names:
        stacks = [ck.tensors[name].data for ck in experts]
        match = selector_match(name, config.router_layers, config.router_layers_index)
        if match is not None and match[1] in FFN_PROJECTION_TAGS.values():
            base = stacks[0]
            for e, arr in enumerate(stacks):
                ns_name = _namespaced(name, e)
                aligned = _aligned_copy(ns_name, base, arr, config.align,
                                        report.alignment_actions)
                out[ns_name] = Tensor._wrap(np.array(aligned), name=ns_name)
                report.expert_param_names.append(ns_name)
            router = _router_name(name, config.moe_method)
            if router not in router_sites:
                router_sites.append(router)
        else:
            if match is not None:
                sel = match[1]
                if sel not in seen_selectors:
                    seen_selectors.add(sel)
                    report.skipped_selectors.append(sel)
            mean = _aligned_mean(name, stacks, config.align, report.alignment_actions)
            out[name] = Tensor._wrap(mean, name=name)
            report.shared_param_names.append(name)
    E = len(experts)
    for router in sorted(router_sites):
        rng = np.random.default_rng([config.seed & 0xFFFFFFFF,
                                     int.from_bytes(router.encode(), "little") % (2**32)])
        out[router] = Tensor._wrap(
            rng.normal(0.0, ROUTER_INIT_STD, size=(arch.d_model, E)), name=router)
        report.new_param_names.append(router)
    moe = cp.MoeInfo(
        num_experts=E,
        num_experts_per_tok=config.num_experts_per_tok,
        router_layers=tuple(config.router_layers),
        router_layers_index=tuple(config.router_layers_index),
        alpha=float(config.alpha),
        expert_names=tuple(e.expert_name for e in config.experts),
        stitch_freq=config.stitch_freq,
    )
    ckpt = cp.build_checkpoint(config.moe_method, arch, out, moe=moe,
                               model_type=config.model_type)
    return ckpt, report


def _compose_bts(config: MoeConfig, experts: list[cp.Checkpoint]):
    hub, stitched = experts[0], experts[1:]
    report = CompositionReport()
    out: dict[str, Tensor] = {}
    for name, t in hub.tensors.items():
        full = f"hub.{name}"
        out[full] = t.with_name(full)
        report.expert_param_names.append(full)
    for e, ckpt in enumerate(stitched):
        for name, t in ckpt.tensors.items():
            full = f"experts.expert_{e}.{name}"
            out[full] = t.with_name(full)
            report.expert_param_names.append(full)
    stitch_tensors = stitch_mod.create_stitch_tensors(
        hub.manifest.arch, [c.manifest.arch for c in stitched],
        config.stitch_freq, config.seed)
    out.update(stitch_tensors)
    report.new_param_names.extend(sorted(stitch_tensors))
    report.expert_param_names.sort()
    moe = cp.MoeInfo(
        num_experts=len(stitched),
        num_experts_per_tok=config.num_experts_per_tok,
        router_layers=tuple(config.router_layers),
        router_layers_index=tuple(config.router_layers_index),
        alpha=float(config.alpha),
        expert_names=tuple(e.expert_name for e in config.experts),
        stitch_freq=config.stitch_freq,
        expert_arch=tuple(c.manifest.arch for c in stitched),
    )
    ckpt = cp.build_checkpoint("bts", hub.manifest.arch, out, moe=moe,
                               model_type=config.model_type)
    return ckpt, report


def compose(config: MoeConfig, base_dir=None) -> tuple[cp.Checkpoint, CompositionReport]:
    """Validate, load every expert, and build the unified checkpoint."""
    diags = validate(config)
    if diags:
        raise ConfigError(diags)
    experts = _load_experts(config, base_dir)
    _check_compatible(config, experts)
    if config.moe_method == "bts":
        return _compose_bts(config, experts)
    return _compose_routed(config, experts)
