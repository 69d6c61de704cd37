"""Executable decoder-only transformer with three FFN regimes.

* ``dense``       -- one set of FFN projections, no routing.
* ``traditional`` -- one router per routed block; the chosen experts are used
                     for every projection inside the block.
* ``btx``         -- one router per routed projection, so a token can follow
                     different experts through gate, up, and down.

At a routing site the gating math is: logits g = h @ W, S = the k largest
logits (ties to the lowest index), weights = softmax over the selected logits
only. Expert mixing is computed as a dense weighted sum with zero weight on
unselected experts, which is numerically identical to sparse evaluation and
keeps forward and backward code straight-line.

Blocks are pre-norm residual: x += attn(norm(x)); x += ffn(norm(x)). The
output head is tied to the token embedding. Position information comes from
a deterministic sinusoidal encoding.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .checkpoint import ArchInfo, Checkpoint, Manifest, MoeInfo, build_checkpoint
from .errors import (
    DimensionMismatch,
    EmptyInput,
    InvariantViolation,
    KOutOfRange,
    ModeMismatch,
    TokenOutOfVocab,
)
from .tensor import Tensor, as_array, top_k_indices
from .trace import RouteDecision, RoutingTrace, TokenInfo

RMS_EPS = 1e-12  # f64 engine: eps only guards the all-zero vector
PROJECTIONS = ("gate", "up", "down")
BLOCK_SITE = "block"


def sinusoidal_positions(n_positions: int, d_model: int) -> np.ndarray:
    """Classic fixed sin/cos position table, (n_positions, d_model)."""
    pos = np.arange(n_positions)[:, None]
    dim = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((n_positions, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model - d_model // 2])
    return table


def rms_rows(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS):
    """Row-wise rms normalization of a (T, d) activation matrix."""
    r = np.sqrt(np.mean(x * x, axis=1) + eps)
    return x * gain / r[:, None], r


def _silu(x: np.ndarray) -> np.ndarray:
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return x * s


def gate(h, W, k: int, *, token_index: int = 0, block: int = 0,
         projection: str = BLOCK_SITE) -> RouteDecision:
    """Route one hidden state: top-k of h @ W, softmax over the selected logits."""
    hv = as_array(h)
    Wv = as_array(W)
    if hv.ndim != 1 or Wv.ndim != 2 or hv.shape[0] != Wv.shape[0]:
        raise DimensionMismatch(f"gate got h {hv.shape} and W {Wv.shape}")
    E = Wv.shape[1]
    if not 1 <= k <= E:
        raise KOutOfRange(f"k={k} outside 1..{E}")
    logits = hv @ Wv
    selected = top_k_indices(logits, k)
    chosen = logits[selected]
    e = np.exp(chosen - chosen.max())
    weights = e / e.sum()
    return RouteDecision(token_index=token_index, block=block, projection=projection,
                         selected=selected, weights=weights, logits=logits)


@dataclass
class ProjParams:
    """One FFN projection at one block: shared matrix or per-expert stack."""

    shared: np.ndarray | None = None
    experts: np.ndarray | None = None  # (E, d_in, d_out)
    router: np.ndarray | None = None   # (d, E), per-projection routing only

    @property
    def routed(self) -> bool:
        return self.router is not None


@dataclass
class BlockParams:
    index: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    attn_gain: np.ndarray
    mlp_gain: np.ndarray
    gate: ProjParams
    up: ProjParams
    down: ProjParams
    router: np.ndarray | None = None  # (d, E), per-block routing only

    def proj(self, name: str) -> ProjParams:
        return {"gate": self.gate, "up": self.up, "down": self.down}[name]

    @property
    def is_routed(self) -> bool:
        return self.router is not None or any(
            p.routed for p in (self.gate, self.up, self.down)
        )


class MoeModel:
    """A checkpoint bound to executable block structure.

    Parameters stay in the checkpoint's name -> Tensor map (immutable);
    BlockParams hold array views into them.
    """

    def __init__(self, manifest: Manifest, params: dict[str, Tensor]):
        if manifest.model_kind == "bts":
            raise ModeMismatch("bts checkpoints execute through BtsModel")
        self.manifest = manifest
        self.params = dict(params)
        self.arch = manifest.arch
        self.mode = manifest.model_kind
        moe = manifest.moe
        self.num_experts = moe.num_experts if moe else 1
        self.k = moe.num_experts_per_tok if moe else 1
        self.alpha = moe.alpha if moe else 0.0
        self.expert_names = list(moe.expert_names) if moe else []
        if self.arch.d_model % self.arch.n_heads != 0:
            raise InvariantViolation("d_model must divide evenly over heads")
        if self.k > self.num_experts:
            raise InvariantViolation(f"k={self.k} exceeds {self.num_experts} experts")
        self.embed = self._get("embed.weight", (self.arch.vocab_size, self.arch.d_model))
        self.final_gain = self._get("final_norm.gain", (self.arch.d_model,))
        self.blocks = [self._build_block(i) for i in range(self.arch.n_blocks)]
        self._check_mode_consistency()
        self.pos_table = sinusoidal_positions(2048, self.arch.d_model)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "MoeModel":
        ckpt.validate()
        return cls(ckpt.manifest, ckpt.tensors)

    def _get(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in self.params:
            raise InvariantViolation(f"checkpoint is missing {name}")
        arr = self.params[name].data
        if arr.shape != shape:
            raise InvariantViolation(f"{name}: shape {arr.shape}, expected {shape}")
        return arr

    def _build_proj(self, block: int, proj: str) -> ProjParams:
        d, dff = self.arch.d_model, self.arch.d_ff
        din, dout = (dff, d) if proj == "down" else (d, dff)
        base = f"blocks.{block}.mlp.{proj}_proj"
        router_name = f"{base}.router.weight"
        router = None
        if router_name in self.params:
            router = self._get(router_name, (d, self.num_experts))
        if f"{base}.weight" in self.params:
            return ProjParams(shared=self._get(f"{base}.weight", (din, dout)), router=router)
        stack = [
            self._get(f"{base}.experts.expert_{e}.weight", (din, dout))
            for e in range(self.num_experts)
        ]
        return ProjParams(experts=np.stack(stack), router=router)

    def _build_block(self, i: int) -> BlockParams:
        d = self.arch.d_model
        return BlockParams(
            index=i,
            wq=self._get(f"blocks.{i}.attn.q_proj.weight", (d, d)),
            wk=self._get(f"blocks.{i}.attn.k_proj.weight", (d, d)),
            wv=self._get(f"blocks.{i}.attn.v_proj.weight", (d, d)),
            wo=self._get(f"blocks.{i}.attn.o_proj.weight", (d, d)),
            attn_gain=self._get(f"blocks.{i}.attn_norm.gain", (d,)),
            mlp_gain=self._get(f"blocks.{i}.mlp_norm.gain", (d,)),
            gate=self._build_proj(i, "gate"),
            up=self._build_proj(i, "up"),
            down=self._build_proj(i, "down"),
            router=(
                self._get(f"blocks.{i}.router.weight", (d, self.num_experts))
                if f"blocks.{i}.router.weight" in self.params
                else None
            ),
        )

    def _check_mode_consistency(self) -> None:
        block_routers = any(b.router is not None for b in self.blocks)
        proj_routers = any(
            p.routed for b in self.blocks for p in (b.gate, b.up, b.down)
        )
        if self.mode == "dense" and (block_routers or proj_routers):
            raise InvariantViolation("dense checkpoint carries router tensors")
        if self.mode == "traditional" and (proj_routers or not block_routers):
            raise InvariantViolation("traditional checkpoint needs per-block routers only")
        if self.mode == "btx" and (block_routers or not proj_routers):
            raise InvariantViolation("btx checkpoint needs per-projection routers only")

    @property
    def routed_blocks(self) -> list[int]:
        return [b.index for b in self.blocks if b.is_routed]

    def routed_projections(self) -> list[str]:
        if self.mode == "traditional":
            return [BLOCK_SITE]
        projs = []
        for p in PROJECTIONS:
            if any(b.proj(p).routed for b in self.blocks):
                projs.append(p)
        return projs

    def decisions_per_token(self) -> int:
        """Routing decisions a single token generates in one forward pass."""
        if self.mode == "traditional":
            return len(self.routed_blocks)
        return sum(
            1 for b in self.blocks for p in PROJECTIONS if b.proj(p).routed
        )

    def replace_params(self, updates: dict[str, np.ndarray]) -> "MoeModel":
        params = dict(self.params)
        for name, arr in updates.items():
            if name not in params:
                raise InvariantViolation(f"unknown parameter {name}")
            params[name] = Tensor._wrap(np.array(arr), name=name)
        return MoeModel(self.manifest, params)

    def trainable_param_names(self) -> list[str]:
        return sorted(n for n in self.params if ".router." in n or n.endswith("router.weight"))

    def to_checkpoint(self) -> Checkpoint:
        return build_checkpoint(self.manifest.model_kind, self.arch, self.params,
                                moe=self.manifest.moe,
                                model_type=self.manifest.model_type)

    # -- forward pieces -------------------------------------------------

    def embed_tokens(self, ids: list[int]) -> np.ndarray:
        T = len(ids)
        if T > self.pos_table.shape[0]:
            self.pos_table = sinusoidal_positions(T, self.arch.d_model)
        return self.embed[ids] + self.pos_table[:T]

    def _attention(self, xn: np.ndarray, blk: BlockParams, collect: bool):
        T, d = xn.shape
        H = self.arch.n_heads
        dh = d // H
        q = xn @ blk.wq
        k = xn @ blk.wk
        v = xn @ blk.wv
        qh = q.reshape(T, H, dh).transpose(1, 0, 2)
        kh = k.reshape(T, H, dh).transpose(1, 0, 2)
        vh = v.reshape(T, H, dh).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
        shifted = scores - scores.max(axis=2, keepdims=True)
        expd = np.exp(shifted)
        attn = expd / expd.sum(axis=2, keepdims=True)
        ctx = (attn @ vh).transpose(1, 0, 2).reshape(T, d)
        out = ctx @ blk.wo
        cache = None
        if collect:
            cache = {"xn": xn, "q": qh, "k": kh, "v": vh, "attn": attn, "ctx": ctx}
        return out, cache

    def _route(self, h: np.ndarray, W: np.ndarray, blk_index: int, projection: str,
               token_offset: int, k: int) -> tuple[np.ndarray, list[RouteDecision]]:
        """Per-token routing over a (T, d) activation; returns (T, E) mix weights."""
        T = h.shape[0]
        omega = np.zeros((T, self.num_experts))
        decisions = []
        for t in range(T):
            dec = gate(h[t], W, k, token_index=token_offset + t,
                       block=blk_index, projection=projection)
            omega[t, dec.selected] = dec.weights
            decisions.append(dec)
        return omega, decisions

    @staticmethod
    def _apply_proj(h: np.ndarray, proj: ProjParams, omega: np.ndarray | None):
        """Run one projection; mixes the expert stack when namespaced.

        Mixing accumulates w_e * (h @ W_e) expert by expert, so zero weights
        contribute exact zeros and k=1 reproduces the single expert bitwise.
        """
        if proj.experts is None:
            return h @ proj.shared, None
        if omega is None:
            raise InvariantViolation("expert stack without routing weights")
        per_exp = [h @ proj.experts[e] for e in range(proj.experts.shape[0])]
        out = np.zeros_like(per_exp[0])
        for e, pe in enumerate(per_exp):
            out += omega[:, e : e + 1] * pe
        return out, per_exp

    def _expert_matrices(self, blk: BlockParams, proj_name: str, e: int) -> np.ndarray:
        proj = blk.proj(proj_name)
        return proj.shared if proj.experts is None else proj.experts[e]

    def _ffn_traditional(self, h: np.ndarray, blk: BlockParams, omega: np.ndarray,
                         collect: bool):
        """Whole-FFN mixing: y = sum_e w_e * down_e(silu(gate_e h) * up_e h)."""
        experts = []
        y = np.zeros_like(h)
        for e in range(self.num_experts):
            a = h @ self._expert_matrices(blk, "gate", e)
            b = h @ self._expert_matrices(blk, "up", e)
            z = _silu(a) * b
            ye = z @ self._expert_matrices(blk, "down", e)
            y += omega[:, e : e + 1] * ye
            if collect:
                experts.append({"a": a, "b": b, "z": z, "y": ye})
        return y, experts

    def _ffn(self, h: np.ndarray, blk: BlockParams, token_offset: int, collect: bool,
             k: int | None = None):
        k = self.k if k is None else k
        decisions: list[RouteDecision] = []
        if self.mode == "traditional" and blk.router is not None:
            omega, decisions = self._route(h, blk.router, blk.index, BLOCK_SITE,
                                           token_offset, k)
            y, experts = self._ffn_traditional(h, blk, omega, collect)
            cache = None
            if collect:
                cache = {"kind": "traditional", "h": h, "omega": omega,
                         "decisions": decisions, "experts": experts}
            return y, decisions, cache
        omegas: dict[str, np.ndarray | None] = {p: None for p in PROJECTIONS}
        if self.mode == "btx":
            for p in PROJECTIONS:
                proj = blk.proj(p)
                if proj.routed:
                    omegas[p], decs = self._route(h, proj.router, blk.index, p,
                                                  token_offset, k)
                    decisions.extend(decs)
        a, gate_per_exp = self._apply_proj(h, blk.gate, omegas["gate"])
        b, up_per_exp = self._apply_proj(h, blk.up, omegas["up"])
        z = _silu(a) * b
        y, down_per_exp = self._apply_proj(z, blk.down, omegas["down"])
        cache = None
        if collect:
            cache = {
                "kind": "btx" if decisions else "dense",
                "h": h, "a": a, "b": b, "z": z,
                "omegas": omegas, "decisions": decisions,
                "per_exp": {"gate": gate_per_exp, "up": up_per_exp, "down": down_per_exp},
            }
        return y, decisions, cache

    def block_forward(self, x: np.ndarray, index: int, token_offset: int = 0,
                      collect: bool = False):
        blk = self.blocks[index]
        xn, r1 = rms_rows(x, blk.attn_gain)
        attn_out, attn_cache = self._attention(xn, blk, collect)
        x_mid = x + attn_out
        hn, r2 = rms_rows(x_mid, blk.mlp_gain)
        ffn_out, decisions, ffn_cache = self._ffn(hn, blk, token_offset, collect)
        x_out = x_mid + ffn_out
        cache = None
        if collect:
            cache = {
                "x_in": x, "r1": r1, "xn": xn, "attn": attn_cache,
                "x_mid": x_mid, "r2": r2, "hn": hn, "ffn": ffn_cache,
            }
        return x_out, decisions, cache

    def head(self, x: np.ndarray, collect: bool = False):
        normed, r = rms_rows(x, self.final_gain)
        logits = normed @ self.embed.T
        cache = {"x_in": x, "r": r, "normed": normed} if collect else None
        return logits, cache

    def _check_ids(self, ids: list[int]) -> None:
        if len(ids) == 0:
            raise EmptyInput("empty token sequence")
        for i in ids:
            if not 0 <= i < self.arch.vocab_size:
                raise TokenOutOfVocab(f"token id {i} outside vocab {self.arch.vocab_size}")

    def _make_trace(self, ids, decisions, label_fn=None) -> RoutingTrace:
        label_fn = label_fn if label_fn is not None else str
        tokens = [TokenInfo(t, int(i), label_fn(int(i))) for t, i in enumerate(ids)]
        return RoutingTrace(
            tokens=tokens, decisions=decisions, mode=self.mode,
            num_experts=self.num_experts, k=self.k,
            routed_blocks=self.routed_blocks, projections=self.routed_projections(),
            expert_names=self.expert_names,
        )

    def forward(self, token_ids, label_fn=None, collect: bool = False):
        """Causal forward pass; returns (next-token logits (T, V), RoutingTrace)."""
        ids = [int(i) for i in token_ids]
        self._check_ids(ids)
        x = self.embed_tokens(ids)
        decisions: list[RouteDecision] = []
        block_caches = []
        x0 = x
        for i in range(self.arch.n_blocks):
            x, decs, bc = self.block_forward(x, i, collect=collect)
            decisions.extend(decs)
            block_caches.append(bc)
        logits, head_cache = self.head(x, collect=collect)
        trace = self._make_trace(ids, decisions, label_fn)
        if collect:
            cache = {"ids": ids, "x0": x0, "blocks": block_caches, "head": head_cache,
                     "logits": logits}
            return logits, trace, cache
        return logits, trace

    def generate(self, prompt_ids, max_new: int, label_fn=None):
        """Greedy decoding; the returned trace covers prompt plus generated tokens."""
        ids = [int(i) for i in prompt_ids]
        self._check_ids(ids)
        logits, trace = self.forward(ids, label_fn)
        for _ in range(max_new):
            nxt = int(np.argmax(logits[-1]))
            ids.append(nxt)
            logits, step_trace = self.forward(ids, label_fn)
            trace.extend_from(step_trace, len(ids) - 1)
        return ids, trace


def forward(model: MoeModel, token_ids, label_fn=None):
    return model.forward(token_ids, label_fn)


def generate(model: MoeModel, prompt_ids, max_new: int, label_fn=None):
    return model.generate(prompt_ids, max_new, label_fn)


def ffn_traditional(model: MoeModel, h, block_index: int, k: int | None = None):
    """Mix whole expert FFNs under one per-block routing decision."""
    if model.mode != "traditional":
        raise ModeMismatch(f"ffn_traditional on a {model.mode} model")
    hv = np.atleast_2d(as_array(h))
    y, decisions, _ = model._ffn(hv, model.blocks[block_index], 0, collect=False, k=k)
    out = y[0] if np.asarray(h).ndim == 1 else y
    return out, decisions[0] if len(decisions) == 1 else decisions


def ffn_btx(model: MoeModel, h, block_index: int, k: int | None = None):
    """Mix each FFN projection under its own routing decision."""
    if model.mode != "btx":
        raise ModeMismatch(f"ffn_btx on a {model.mode} model")
    hv = np.atleast_2d(as_array(h))
    y, decisions, _ = model._ffn(hv, model.blocks[block_index], 0, collect=False, k=k)
    out = y[0] if np.asarray(h).ndim == 1 else y
    return out, decisions


# -- dense checkpoint construction ---------------------------------------


def dense_param_shapes(arch: ArchInfo) -> dict[str, tuple[int, ...]]:
    d, dff = arch.d_model, arch.d_ff
    shapes = {
        "embed.weight": (arch.vocab_size, d),
        "final_norm.gain": (d,),
    }
    for i in range(arch.n_blocks):
        shapes[f"blocks.{i}.attn.q_proj.weight"] = (d, d)
        shapes[f"blocks.{i}.attn.k_proj.weight"] = (d, d)
        shapes[f"blocks.{i}.attn.v_proj.weight"] = (d, d)
        shapes[f"blocks.{i}.attn.o_proj.weight"] = (d, d)
        shapes[f"blocks.{i}.attn_norm.gain"] = (d,)
        shapes[f"blocks.{i}.mlp_norm.gain"] = (d,)
        shapes[f"blocks.{i}.mlp.gate_proj.weight"] = (d, dff)
        shapes[f"blocks.{i}.mlp.up_proj.weight"] = (d, dff)
        shapes[f"blocks.{i}.mlp.down_proj.weight"] = (dff, d)
    return shapes


def tensor_seed(seed: int, name: str) -> list[int]:
    """Stable per-tensor seed stream, independent of iteration order."""
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]


def random_dense_checkpoint(arch: ArchInfo, seed: int = 0, scale: float = 0.5,
                            model_type: str | None = None) -> Checkpoint:
    """Seeded random dense model; embeddings at `scale`, weights scaled by fan-in."""
    tensors = {}
    for name, shape in dense_param_shapes(arch).items():
        if name.endswith(".gain"):
            tensors[name] = Tensor(np.ones(shape), name=name)
            continue
        rng = np.random.default_rng(tensor_seed(seed, name))
        std = scale if name == "embed.weight" else scale / np.sqrt(shape[0])
        tensors[name] = Tensor._wrap(rng.normal(0.0, std, size=shape), name=name)
    return build_checkpoint("dense", arch, tensors, model_type=model_type)
