"""Stitched execution: frozen hub and expert models fused at selected depths.

The hub and every expert run their transformer blocks in lockstep. On top of
selected blocks a trainable StitchLayer exchanges information in exactly one
direction per site:

* ``hub_into_experts`` (all intermediate sites): each expert's state becomes
  a sigmoid-gated blend of its own state and a projection of the hub's state,
    s_e = sigmoid(h_e . g_e + b_e)
    h_e' = s_e * Q_e(h0) + (1 - s_e) * h_e
* ``experts_into_hub`` (the final block, always):
    alpha = softmax(h0 . w_gate + b_gate)   over hub + E experts
    h0'   = alpha_0 * h0 + sum_e alpha_{e+1} * P_e(h_e)

Sites sit at every block whose 1-based index is a multiple of stitch_freq,
plus the final block. Final logits always come from the hub's head.

Initialization keeps the composed model equivalent to the hub: gate biases
saturate toward the hub (+6 hub logit, -6 sigmoid bias) and the expert-to-hub
projections P_e start at zero, so the hub logits are reproduced to float
precision while every stitch tensor still receives a nonzero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import ArchInfo, Checkpoint, Manifest, build_checkpoint
from .errors import DimensionMismatch, InvariantViolation, ModeMismatch
from .model import MoeModel, tensor_seed
from .tensor import Tensor
from .trace import TokenInfo

STITCH_INIT_STD = 0.02
HUB_GATE_BIAS = 6.0
EXPERT_GATE_BIAS = -6.0

EXPERTS_INTO_HUB = "experts_into_hub"
HUB_INTO_EXPERTS = "hub_into_experts"


def stitch_sites(n_blocks: int, stitch_freq: int) -> list[int]:
    """Block indices that carry a stitch: every stitch_freq-th block plus the last."""
    if n_blocks < 1 or stitch_freq < 1:
        raise InvariantViolation("n_blocks and stitch_freq must be >= 1")
    sites = {i for i in range(n_blocks) if (i + 1) % stitch_freq == 0}
    sites.add(n_blocks - 1)
    return sorted(sites)


def site_direction(site: int, n_blocks: int) -> str:
    return EXPERTS_INTO_HUB if site == n_blocks - 1 else HUB_INTO_EXPERTS


@dataclass
class StitchLayer:
    site: int
    direction: str
    proj: list[np.ndarray]
    gate_weight: np.ndarray | None = None   # (d_hub, E+1), experts_into_hub
    gate_bias: np.ndarray | None = None     # (E+1,)
    gate_vecs: list[np.ndarray] | None = None  # per-expert (d_e,), hub_into_experts
    gate_biases: list[float] | None = None


def _rows(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise DimensionMismatch(f"hidden state must be 1-d or 2-d, got {arr.shape}")
    return arr, False


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _experts_into_hub_full(h0: np.ndarray, h_experts: list[np.ndarray],
                           layer: StitchLayer):
    if layer.gate_weight is None or h0.shape[1] != layer.gate_weight.shape[0]:
        raise DimensionMismatch("gate weight does not match the hub state")
    logits = h0 @ layer.gate_weight + layer.gate_bias
    alpha = _softmax_rows(logits)
    proj_out = [h_experts[e] @ layer.proj[e] for e in range(len(h_experts))]
    out = alpha[:, 0:1] * h0
    for e, po in enumerate(proj_out):
        out = out + alpha[:, e + 1 : e + 2] * po
    return out, alpha, proj_out


def _hub_into_experts_full(h0: np.ndarray, h_experts: list[np.ndarray],
                           layer: StitchLayer):
    if layer.gate_vecs is None:
        raise DimensionMismatch("layer has no per-expert gates")
    outs, sigmas, proj_out = [], [], []
    for e, h_e in enumerate(h_experts):
        if h_e.shape[1] != layer.gate_vecs[e].shape[0]:
            raise DimensionMismatch("gate vector does not match the expert state")
        pre = h_e @ layer.gate_vecs[e] + layer.gate_biases[e]
        s = _sigmoid(pre)
        po = h0 @ layer.proj[e]
        outs.append(s[:, None] * po + (1.0 - s)[:, None] * h_e)
        sigmas.append(s)
        proj_out.append(po)
    return outs, np.stack(sigmas, axis=1), proj_out


def stitch_experts_into_hub(h0, h_experts, layer: StitchLayer) -> np.ndarray:
    """Refine the hub state with gated expert projections; experts unchanged."""
    h0m, squeeze = _rows(h0)
    hs = [_rows(h)[0] for h in h_experts]
    out, _, _ = _experts_into_hub_full(h0m, hs, layer)
    return out[0] if squeeze else out


def stitch_hub_into_experts(h0, h_experts, layer: StitchLayer) -> list[np.ndarray]:
    """Blend a projection of the hub into each expert state; hub unchanged."""
    h0m, squeeze = _rows(h0)
    hs = [_rows(h)[0] for h in h_experts]
    outs, _, _ = _hub_into_experts_full(h0m, hs, layer)
    return [o[0] for o in outs] if squeeze else outs


# -- composed-checkpoint plumbing -----------------------------------------


def create_stitch_tensors(hub_arch: ArchInfo, expert_archs: list[ArchInfo],
                          stitch_freq: int, seed: int = 0) -> dict[str, Tensor]:
    """Fresh stitch tensors for every site, identity-preserving at init."""
    tensors: dict[str, Tensor] = {}
    n_blocks = hub_arch.n_blocks
    E = len(expert_archs)

    def gauss(name: str, shape) -> np.ndarray:
        rng = np.random.default_rng(tensor_seed(seed, name))
        return rng.normal(0.0, STITCH_INIT_STD, size=shape)

    for site in stitch_sites(n_blocks, stitch_freq):
        prefix = f"stitch.{site}"
        if site_direction(site, n_blocks) == EXPERTS_INTO_HUB:
            name = f"{prefix}.gate.weight"
            tensors[name] = Tensor._wrap(gauss(name, (hub_arch.d_model, E + 1)), name=name)
            bias = np.zeros(E + 1)
            bias[0] = HUB_GATE_BIAS
            tensors[f"{prefix}.gate.bias"] = Tensor(bias, name=f"{prefix}.gate.bias")
            for e, ea in enumerate(expert_archs):
                # zero start: the hub logits stay exact while alpha_e > 0
                # keeps the gradient alive
                name = f"{prefix}.expert_{e}.proj.weight"
                tensors[name] = Tensor(np.zeros((ea.d_model, hub_arch.d_model)), name=name)
        else:
            for e, ea in enumerate(expert_archs):
                name = f"{prefix}.expert_{e}.proj.weight"
                tensors[name] = Tensor._wrap(gauss(name, (hub_arch.d_model, ea.d_model)),
                                             name=name)
                name = f"{prefix}.expert_{e}.gate.weight"
                tensors[name] = Tensor._wrap(gauss(name, (ea.d_model,)), name=name)
                bname = f"{prefix}.expert_{e}.gate.bias"
                tensors[bname] = Tensor([EXPERT_GATE_BIAS], name=bname)
    return tensors


@dataclass
class StitchSiteRecord:
    site: int
    direction: str
    gates: np.ndarray  # (T, E+1) alphas or (T, E) sigmoids


@dataclass
class StitchTrace:
    tokens: list[TokenInfo]
    sites: list[StitchSiteRecord]
    num_experts: int
    stitch_freq: int
    expert_names: list[str] = field(default_factory=list)


def export_stitch_trace(trace: StitchTrace) -> dict:
    """Parallel, simpler document for stitch gates (no token-level routing here)."""
    return {
        "model": {
            "mode": "bts",
            "num_experts": trace.num_experts,
            "stitch_freq": trace.stitch_freq,
            "expert_names": list(trace.expert_names),
        },
        "tokens": [
            {"index": t.index, "id": t.token_id, "text": t.text} for t in trace.tokens
        ],
        "sites": [
            {
                "site": s.site,
                "direction": s.direction,
                "gates": [[float(v) for v in row] for row in s.gates],
            }
            for s in trace.sites
        ],
    }


class BtsModel:
    """Frozen hub + frozen experts + trainable stitch layers."""

    mode = "bts"

    def __init__(self, manifest: Manifest, params: dict[str, Tensor]):
        if manifest.model_kind != "bts":
            raise ModeMismatch(f"BtsModel needs a bts checkpoint, got {manifest.model_kind}")
        if manifest.moe is None or manifest.moe.stitch_freq is None:
            raise InvariantViolation("bts manifest lacks moe.stitch_freq")
        self.manifest = manifest
        self.params = dict(params)
        self.arch = manifest.arch
        self.num_experts = manifest.moe.num_experts
        self.stitch_freq = manifest.moe.stitch_freq
        self.expert_names = list(manifest.moe.expert_names)
        self.hub = self._submodel("hub", self.arch)
        expert_archs = manifest.moe.expert_arch or tuple(
            self.arch for _ in range(self.num_experts))
        self.experts = [
            self._submodel(f"experts.expert_{e}", expert_archs[e])
            for e in range(self.num_experts)
        ]
        for m in self.experts:
            if (m.arch.vocab_size, m.arch.n_blocks) != (self.arch.vocab_size,
                                                        self.arch.n_blocks):
                raise InvariantViolation("hub and experts must share vocab and n_blocks")
        self.sites = stitch_sites(self.arch.n_blocks, self.stitch_freq)
        self.stitches = {s: self._build_layer(s) for s in self.sites}

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "BtsModel":
        ckpt.validate()
        return cls(ckpt.manifest, ckpt.tensors)

    def _submodel(self, prefix: str, arch: ArchInfo) -> MoeModel:
        dot = prefix + "."
        sub = {
            name[len(dot):]: t.with_name(name[len(dot):])
            for name, t in self.params.items()
            if name.startswith(dot)
        }
        if not sub:
            raise InvariantViolation(f"checkpoint has no tensors under {prefix}.*")
        return MoeModel.from_checkpoint(build_checkpoint("dense", arch, sub))

    def _stitch_param(self, name: str) -> np.ndarray:
        if name not in self.params:
            raise InvariantViolation(f"checkpoint is missing {name}")
        return self.params[name].data

    def _build_layer(self, site: int) -> StitchLayer:
        prefix = f"stitch.{site}"
        direction = site_direction(site, self.arch.n_blocks)
        proj = [
            self._stitch_param(f"{prefix}.expert_{e}.proj.weight")
            for e in range(self.num_experts)
        ]
        if direction == EXPERTS_INTO_HUB:
            return StitchLayer(
                site=site, direction=direction, proj=proj,
                gate_weight=self._stitch_param(f"{prefix}.gate.weight"),
                gate_bias=self._stitch_param(f"{prefix}.gate.bias"),
            )
        return StitchLayer(
            site=site, direction=direction, proj=proj,
            gate_vecs=[
                self._stitch_param(f"{prefix}.expert_{e}.gate.weight")
                for e in range(self.num_experts)
            ],
            gate_biases=[
                float(self._stitch_param(f"{prefix}.expert_{e}.gate.bias")[0])
                for e in range(self.num_experts)
            ],
        )

    def trainable_param_names(self) -> list[str]:
        return sorted(n for n in self.params if n.startswith("stitch."))

    def to_checkpoint(self) -> Checkpoint:
        return build_checkpoint("bts", self.arch, self.params,
                                moe=self.manifest.moe,
                                model_type=self.manifest.model_type)

    def replace_params(self, updates: dict[str, np.ndarray]) -> "BtsModel":
        params = dict(self.params)
        for name, arr in updates.items():
            if name not in params:
                raise InvariantViolation(f"unknown parameter {name}")
            params[name] = Tensor._wrap(np.array(arr), name=name)
        return BtsModel(self.manifest, params)

    def forward(self, token_ids, label_fn=None, collect: bool = False):
        """Run hub and experts in lockstep; logits come from the hub's head."""
        ids = [int(i) for i in token_ids]
        self.hub._check_ids(ids)
        streams = [self.hub] + self.experts
        states = [m.embed_tokens(ids) for m in streams]
        records: list[StitchSiteRecord] = []
        layer_caches = []
        for i in range(self.arch.n_blocks):
            block_caches = []
            for idx, m in enumerate(streams):
                states[idx], _, bc = m.block_forward(states[idx], i, collect=collect)
                block_caches.append(bc)
            site_cache = None
            if i in self.stitches:
                layer = self.stitches[i]
                h0, hs = states[0], states[1:]
                if layer.direction == EXPERTS_INTO_HUB:
                    out, alpha, proj_out = _experts_into_hub_full(h0, hs, layer)
                    records.append(StitchSiteRecord(i, layer.direction, alpha))
                    if collect:
                        site_cache = {"h0": h0, "hs": hs, "alpha": alpha,
                                      "proj_out": proj_out}
                    states[0] = out
                else:
                    outs, sigmas, proj_out = _hub_into_experts_full(h0, hs, layer)
                    records.append(StitchSiteRecord(i, layer.direction, sigmas))
                    if collect:
                        site_cache = {"h0": h0, "hs": hs, "sigmas": sigmas,
                                      "proj_out": proj_out}
                    states[1:] = outs
            layer_caches.append({"blocks": block_caches, "site": site_cache})
        logits, head_cache = self.hub.head(states[0], collect=collect)
        label_fn = label_fn if label_fn is not None else str
        trace = StitchTrace(
            tokens=[TokenInfo(t, int(tok), label_fn(int(tok))) for t, tok in enumerate(ids)],
            sites=records, num_experts=self.num_experts, stitch_freq=self.stitch_freq,
            expert_names=self.expert_names,
        )
        if collect:
            cache = {"ids": ids, "layers": layer_caches, "head": head_cache,
                     "logits": logits}
            return logits, trace, cache
        return logits, trace


    def generate(self, prompt_ids, max_new: int, label_fn=None):
        """Greedy decoding on the hub output; trace covers the final sequence."""
        ids = [int(i) for i in prompt_ids]
        logits, trace = self.forward(ids, label_fn)
        for _ in range(max_new):
            ids.append(int(np.argmax(logits[-1])))
            logits, trace = self.forward(ids, label_fn)
        return ids, trace


def bts_forward(model: BtsModel, token_ids, label_fn=None):
    return model.forward(token_ids, label_fn)
