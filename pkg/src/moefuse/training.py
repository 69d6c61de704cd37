"""Losses and analytic gradients for the trainable parameter subsets.

Only two parameter families ever train: routers (traditional / btx) and
stitch tensors (bts). The transformer backbone stays frozen, but gradients
still have to flow through every block's activations to reach routers in
earlier layers, so this module carries a full reverse pass over the cached
forward activations.

The top-k selection is treated as constant during differentiation (straight
through): away from logit ties both the selected set and the top-1 counts
are locally constant, so this is the exact gradient almost everywhere and
central finite differences agree with it.

Load balancing uses the f*P form: f_e is the fraction of routing decisions
whose top-1 pick is expert e, P_e the mean full-softmax probability of e
over all decisions, and

    lb = E * sum_e f_e * P_e

scaled by E (not E^2) so perfectly uniform routing scores exactly 1.0 and
the alpha knob stays interpretable across expert counts. Conventions differ
across the literature; this one is pinned by the calibration tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, ModeMismatch
from .model import MoeModel, rms_rows
from .stitch import EXPERTS_INTO_HUB, BtsModel
from .trace import RouteDecision


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    lb: float
    alpha: float

    @property
    def total(self) -> float:
        if self.alpha == 0.0:
            return self.ce
        return self.ce + self.alpha * self.lb


@dataclass
class TrainState:
    trainable: tuple[str, ...]
    learning_rate: float
    steps_done: int
    seed: int


def _softmax_vec(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _lb_stats(decisions: list[RouteDecision], num_experts: int,
              count_all_k: bool = False):
    counts = np.zeros(num_experts)
    probs = np.zeros(num_experts)
    for dec in decisions:
        if count_all_k:
            counts[dec.selected] += 1.0 / len(dec.selected)
        else:
            counts[dec.selected[0]] += 1.0
        probs += _softmax_vec(dec.logits)
    f = counts / len(decisions)
    p = probs / len(decisions)
    return float(num_experts * np.dot(f, p)), f, p


def load_balance_loss(decisions: list[RouteDecision], num_experts: int,
                      count_all_k: bool = False) -> float:
    """E * sum_e f_e * P_e over the given routing decisions."""
    if not decisions:
        raise EmptyInput("no routing decisions")
    lb, _, _ = _lb_stats(decisions, num_experts, count_all_k)
    return lb


# -- cross entropy ----------------------------------------------------------


def _sequence_nll(logits: np.ndarray, targets: list[int]) -> float:
    rows = logits[: len(targets)]
    m = rows.max(axis=1)
    lse = m + np.log(np.exp(rows - m[:, None]).sum(axis=1))
    picked = rows[np.arange(len(targets)), targets]
    return float((lse - picked).sum())


def _sequence_dlogits(logits: np.ndarray, targets: list[int], scale: float) -> np.ndarray:
    rows = logits[: len(targets)]
    m = rows.max(axis=1, keepdims=True)
    e = np.exp(rows - m)
    probs = e / e.sum(axis=1, keepdims=True)
    d = probs.copy()
    d[np.arange(len(targets)), targets] -= 1.0
    d *= scale
    out = np.zeros_like(logits)
    out[: len(targets)] = d
    return out


# -- shared backward pieces --------------------------------------------------


def _rms_rows_backward(dy: np.ndarray, x: np.ndarray, gain: np.ndarray,
                       r: np.ndarray) -> np.ndarray:
    gy = dy * gain
    dot = np.sum(gy * x, axis=1)
    d = x.shape[1]
    return gy / r[:, None] - x * (dot / (d * r**3))[:, None]


def _silu_and_grad(a: np.ndarray):
    s = np.empty_like(a)
    pos = a >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ex = np.exp(a[~pos])
    s[~pos] = ex / (1.0 + ex)
    return a * s, s * (1.0 + a * (1.0 - s))


def _attn_backward(dout: np.ndarray, ac: dict, blk, n_heads: int) -> np.ndarray:
    xn = ac["xn"]
    T, d = xn.shape
    dh_dim = d // n_heads
    qh, kh, vh, attn = ac["q"], ac["k"], ac["v"], ac["attn"]
    dctx = (dout @ blk.wo.T).reshape(T, n_heads, dh_dim).transpose(1, 0, 2)
    dA = dctx @ vh.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dctx
    dS = attn * (dA - np.sum(dA * attn, axis=2, keepdims=True))
    dS = dS / np.sqrt(dh_dim)
    dq = dS @ kh
    dk = dS.transpose(0, 2, 1) @ qh
    dq_f = dq.transpose(1, 0, 2).reshape(T, d)
    dk_f = dk.transpose(1, 0, 2).reshape(T, d)
    dv_f = dv.transpose(1, 0, 2).reshape(T, d)
    return dq_f @ blk.wq.T + dk_f @ blk.wk.T + dv_f @ blk.wv.T


def _route_backward(h: np.ndarray, W: np.ndarray, decisions: list[RouteDecision],
                    domega: np.ndarray | None, lb_v: np.ndarray | None,
                    grads: dict, router_name: str) -> np.ndarray:
    """Backprop through one router site: renormalized softmax plus the lb term."""
    dW = grads[router_name]
    dh = np.zeros_like(h)
    E = W.shape[1]
    for t, dec in enumerate(decisions):
        dg = np.zeros(E)
        if domega is not None:
            w = dec.weights
            dw = domega[t, dec.selected]
            dg[dec.selected] = w * (dw - np.dot(dw, w))
        if lb_v is not None:
            p = _softmax_vec(dec.logits)
            dg += p * (lb_v - np.dot(lb_v, p))
        dW += np.outer(h[t], dg)
        dh[t] = W @ dg
    return dh


def _ffn_backward_traditional(dy: np.ndarray, fc: dict, blk, model: MoeModel,
                              lb_v, grads: dict) -> np.ndarray:
    h, omega = fc["h"], fc["omega"]
    domega = np.zeros_like(omega)
    dh = np.zeros_like(h)
    for e in range(model.num_experts):
        exp = fc["experts"][e]
        domega[:, e] = np.sum(dy * exp["y"], axis=1)
        dye = omega[:, e : e + 1] * dy
        dz = dye @ model._expert_matrices(blk, "down", e).T
        silu_a, dsilu = _silu_and_grad(exp["a"])
        da = dz * exp["b"] * dsilu
        db = dz * silu_a
        dh += da @ model._expert_matrices(blk, "gate", e).T
        dh += db @ model._expert_matrices(blk, "up", e).T
    router_name = f"blocks.{blk.index}.router.weight"
    dh += _route_backward(h, blk.router, fc["decisions"], domega, lb_v,
                          grads, router_name)
    return dh


def _ffn_backward_btx(dy: np.ndarray, fc: dict, blk, model: MoeModel,
                      lb_v, grads: dict) -> np.ndarray:
    h, a, b, z = fc["h"], fc["a"], fc["b"], fc["z"]
    omegas, per = fc["omegas"], fc["per_exp"]
    domega = {p: None for p in ("gate", "up", "down")}

    def proj_backward(dout, name, inp, inp_per_exp):
        proj = blk.proj(name)
        if proj.experts is None:
            return dout @ proj.shared.T
        om = omegas[name]
        if om is None:
            raise ModeMismatch(f"expert stack without routing at block {blk.index}")
        domega[name] = np.column_stack([
            np.sum(dout * inp_per_exp[e], axis=1) for e in range(model.num_experts)
        ])
        dinp = np.zeros_like(inp)
        for e in range(model.num_experts):
            dinp += om[:, e : e + 1] * (dout @ proj.experts[e].T)
        return dinp

    dz = proj_backward(dy, "down", z, per["down"])
    silu_a, dsilu = _silu_and_grad(a)
    da = dz * b * dsilu
    db = dz * silu_a
    dh = proj_backward(da, "gate", h, per["gate"])
    dh = dh + proj_backward(db, "up", h, per["up"])
    by_proj = {p: [] for p in ("gate", "up", "down")}
    for dec in fc["decisions"]:
        by_proj[dec.projection].append(dec)
    for p, decs in by_proj.items():
        if not decs:
            continue
        router_name = f"blocks.{blk.index}.mlp.{p}_proj.router.weight"
        dh += _route_backward(h, blk.proj(p).router, decs, domega[p], lb_v,
                              grads, router_name)
    return dh


def _block_backward(dx_out: np.ndarray, bc: dict, blk, model: MoeModel,
                    lb_v, grads: dict) -> np.ndarray:
    fc = bc["ffn"]
    if fc["kind"] == "traditional":
        dhn = _ffn_backward_traditional(dx_out, fc, blk, model, lb_v, grads)
    else:
        dhn = _ffn_backward_btx(dx_out, fc, blk, model, lb_v, grads)
    dx_mid = dx_out + _rms_rows_backward(dhn, bc["x_mid"], blk.mlp_gain, bc["r2"])
    dxn = _attn_backward(dx_mid, bc["attn"], blk, model.arch.n_heads)
    return dx_mid + _rms_rows_backward(dxn, bc["x_in"], blk.attn_gain, bc["r1"])


def _head_backward(dlogits: np.ndarray, hc: dict, model: MoeModel) -> np.ndarray:
    dnormed = dlogits @ model.embed
    return _rms_rows_backward(dnormed, hc["x_in"], model.final_gain, hc["r"])


def _sequence_backward(model: MoeModel, cache: dict, dlogits: np.ndarray,
                       lb_v, grads: dict) -> None:
    dx = _head_backward(dlogits, cache["head"], model)
    for i in reversed(range(model.arch.n_blocks)):
        dx = _block_backward(dx, cache["blocks"][i], model.blocks[i], model,
                             lb_v, grads)


def _check_batch(batch) -> int:
    if not batch:
        raise EmptyInput("empty batch")
    n_pred = sum(len(seq) - 1 for seq in batch)
    if n_pred <= 0:
        raise EmptyInput("batch contains no next-token targets")
    return n_pred


# -- public API: losses ------------------------------------------------------


def batch_loss(model, batch, alpha: float | None = None) -> LossBreakdown:
    """Forward-only loss over a batch of token-id sequences."""
    n_pred = _check_batch(batch)
    if isinstance(model, BtsModel):
        nll = sum(_sequence_nll(model.forward(seq)[0], list(seq[1:])) for seq in batch)
        return LossBreakdown(ce=nll / n_pred, lb=0.0,
                             alpha=0.0 if alpha is None else float(alpha))
    if model.mode not in ("traditional", "btx"):
        raise ModeMismatch(f"loss for a {model.mode} model has no trainable routing")
    alpha = model.alpha if alpha is None else float(alpha)
    nll = 0.0
    decisions: list[RouteDecision] = []
    for seq in batch:
        logits, trace = model.forward(seq)
        nll += _sequence_nll(logits, list(seq[1:]))
        decisions.extend(trace.decisions)
    lb, _, _ = _lb_stats(decisions, model.num_experts) if decisions else (0.0, None, None)
    return LossBreakdown(ce=nll / n_pred, lb=lb, alpha=alpha)


def router_grads(model: MoeModel, batch, alpha: float | None = None):
    """Analytic gradients of total loss w.r.t. every router matrix.

    Returns (grads, LossBreakdown); grads maps router names to arrays and
    every non-router gradient is zero by construction (never materialized).
    """
    if not isinstance(model, MoeModel) or model.mode not in ("traditional", "btx"):
        raise ModeMismatch("router gradients need a traditional or btx model")
    n_pred = _check_batch(batch)
    alpha = model.alpha if alpha is None else float(alpha)
    runs = []
    decisions: list[RouteDecision] = []
    nll = 0.0
    for seq in batch:
        logits, trace, cache = model.forward(seq, collect=True)
        runs.append((list(seq), cache))
        decisions.extend(trace.decisions)
        nll += _sequence_nll(logits, list(seq[1:]))
    ce = nll / n_pred
    lb, f, _ = _lb_stats(decisions, model.num_experts) if decisions else (0.0, None, None)
    lb_v = None
    if alpha != 0.0 and decisions:
        lb_v = alpha * model.num_experts * f / len(decisions)
    grads = {name: np.zeros(model.params[name].shape)
             for name in model.trainable_param_names()}
    for seq, cache in runs:
        dlogits = _sequence_dlogits(cache["logits"], seq[1:], 1.0 / n_pred)
        _sequence_backward(model, cache, dlogits, lb_v, grads)
    return grads, LossBreakdown(ce=ce, lb=lb, alpha=alpha)


def stitch_grads(bts: BtsModel, batch):
    """Analytic gradients of cross entropy w.r.t. the stitch tensors only."""
    if not isinstance(bts, BtsModel):
        raise ModeMismatch("stitch gradients need a bts model")
    n_pred = _check_batch(batch)
    runs = []
    nll = 0.0
    for seq in batch:
        logits, _, cache = bts.forward(seq, collect=True)
        runs.append((list(seq), cache))
        nll += _sequence_nll(logits, list(seq[1:]))
    ce = nll / n_pred
    grads = {name: np.zeros(bts.params[name].shape)
             for name in bts.trainable_param_names()}
    streams = [bts.hub] + bts.experts
    for seq, cache in runs:
        dlogits = _sequence_dlogits(cache["logits"], seq[1:], 1.0 / n_pred)
        dstates = [None] * len(streams)
        dstates[0] = _head_backward(dlogits, cache["head"], bts.hub)
        for e in range(bts.num_experts):
            dstates[e + 1] = np.zeros((len(seq), bts.experts[e].arch.d_model))
        for i in reversed(range(bts.arch.n_blocks)):
            lc = cache["layers"][i]
            if lc["site"] is not None:
                _site_backward(bts, i, lc["site"], dstates, grads)
            for idx, stream in enumerate(streams):
                dstates[idx] = _block_backward(dstates[idx], lc["blocks"][idx],
                                               stream.blocks[i], stream, None, grads)
    return grads, LossBreakdown(ce=ce, lb=0.0, alpha=0.0)


def _site_backward(bts: BtsModel, site: int, sc: dict, dstates: list, grads: dict) -> None:
    layer = bts.stitches[site]
    prefix = f"stitch.{site}"
    if layer.direction == EXPERTS_INTO_HUB:
        h0, hs, alpha, proj_out = sc["h0"], sc["hs"], sc["alpha"], sc["proj_out"]
        d0p = dstates[0]
        T = h0.shape[0]
        c = np.empty((T, bts.num_experts + 1))
        c[:, 0] = np.sum(d0p * h0, axis=1)
        for e in range(bts.num_experts):
            c[:, e + 1] = np.sum(d0p * proj_out[e], axis=1)
        dlogits = alpha * (c - np.sum(c * alpha, axis=1, keepdims=True))
        grads[f"{prefix}.gate.weight"] += h0.T @ dlogits
        grads[f"{prefix}.gate.bias"] += dlogits.sum(axis=0)
        dstates[0] = alpha[:, 0:1] * d0p + dlogits @ layer.gate_weight.T
        for e in range(bts.num_experts):
            scaled = alpha[:, e + 1 : e + 2] * d0p
            grads[f"{prefix}.expert_{e}.proj.weight"] += hs[e].T @ scaled
            dstates[e + 1] = dstates[e + 1] + scaled @ layer.proj[e].T
    else:
        h0, hs, sigmas, proj_out = sc["h0"], sc["hs"], sc["sigmas"], sc["proj_out"]
        dh0 = np.zeros_like(dstates[0])
        for e in range(bts.num_experts):
            dep = dstates[e + 1]
            s = sigmas[:, e]
            ds = np.sum(dep * (proj_out[e] - hs[e]), axis=1)
            dpre = ds * s * (1.0 - s)
            grads[f"{prefix}.expert_{e}.gate.weight"] += hs[e].T @ dpre
            grads[f"{prefix}.expert_{e}.gate.bias"] += np.array([dpre.sum()])
            sdep = s[:, None] * dep
            grads[f"{prefix}.expert_{e}.proj.weight"] += h0.T @ sdep
            dh0 += sdep @ layer.proj[e].T
            dstates[e + 1] = (1.0 - s)[:, None] * dep + dpre[:, None] * layer.gate_vecs[e][None, :]
        dstates[0] = dstates[0] + dh0


# -- SGD wrapper --------------------------------------------------------------


def loss_and_grads(model, batch, alpha: float | None = None):
    if isinstance(model, BtsModel):
        return stitch_grads(model, batch)
    return router_grads(model, batch, alpha)


def train(model, dataset, steps: int, lr: float, alpha: float | None = None):
    """Plain full-batch gradient descent on the trainable subset.

    Returns (trained model, per-step LossBreakdown history). The loss in
    history[i] is measured before step i's update, so lr=0 gives a constant
    curve.
    """
    trainable = tuple(model.trainable_param_names())
    if not trainable:
        raise ModeMismatch("model has no trainable routing or stitch tensors")
    state = TrainState(trainable=trainable, learning_rate=lr, steps_done=0, seed=0)
    history: list[LossBreakdown] = []
    current = model
    for _ in range(steps):
        grads, breakdown = loss_and_grads(current, dataset, alpha)
        history.append(breakdown)
        if lr != 0.0:
            updates = {
                name: current.params[name].data - lr * grads[name] for name in trainable
            }
            current = current.replace_params(updates)
        state.steps_done += 1
    return current, history


# -- finite-difference oracle --------------------------------------------------


def numerical_grads(model, batch, names, alpha: float | None = None,
                    step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradients of total loss, for verifying the analytic path."""
    out = {}
    for name in names:
        base = model.params[name].data
        g = np.zeros(base.shape)
        for idx in np.ndindex(*base.shape):
            plus = base.copy()
            plus[idx] += step
            minus = base.copy()
            minus[idx] -= step
            lp = batch_loss(model.replace_params({name: plus}), batch, alpha).total
            lm = batch_loss(model.replace_params({name: minus}), batch, alpha).total
            g[idx] = (lp - lm) / (2.0 * step)
        out[name] = g
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
