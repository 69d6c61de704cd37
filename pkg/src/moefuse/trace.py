"""Routing traces and the statistics computed over them.

A forward pass emits one RouteDecision per token per routing site. A site is
a (block, projection) pair: per-projection routing has three sites per routed
block (gate, up, down), per-block routing has one (tagged ``block``).

The per-token aggregate over sites L_t is

    w_bar[t, e] = (1 / |L_t|) * sum over (block, proj) in L_t of w[t, e]

where unselected experts contribute 0 at each site, so every aggregate still
sums to 1. The dominant expert for a token is argmax_e w_bar[t, e].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointIOError, EmptyInput

DEFAULT_COLLAPSE_THRESHOLD = 0.9


@dataclass(frozen=True)
class TokenInfo:
    index: int
    token_id: int
    text: str


@dataclass
class RouteDecision:
    """One routing choice: which experts a token used at one site."""

    token_index: int
    block: int
    projection: str
    selected: list[int]
    weights: np.ndarray
    logits: np.ndarray

    def full_weights(self, num_experts: int) -> np.ndarray:
        """Weights extended over all experts, zeros for the unselected."""
        out = np.zeros(num_experts)
        out[self.selected] = self.weights
        return out


@dataclass
class RoutingTrace:
    tokens: list[TokenInfo]
    decisions: list[RouteDecision]
    mode: str
    num_experts: int
    k: int
    routed_blocks: list[int]
    projections: list[str]
    expert_names: list[str] = field(default_factory=list)

    def extend_from(self, other: "RoutingTrace", token_index: int) -> None:
        """Adopt one token (and its decisions) from a longer trace."""
        self.tokens.append(other.tokens[token_index])
        self.decisions.extend(d for d in other.decisions if d.token_index == token_index)


@dataclass
class TokenSummary:
    token_index: int
    weights: np.ndarray
    dominant: int | None
    site_count: int


def aggregate(trace: RoutingTrace, blocks=None, projections=None) -> list[TokenSummary]:
    """Per-token mean of site weight vectors over the sites passing the filter.

    A token whose every site is filtered out gets site_count 0 and a null
    dominant expert rather than an error.
    """
    block_set = None if blocks is None else {int(b) for b in blocks}
    proj_set = None if projections is None else {str(p) for p in projections}
    E = trace.num_experts
    sums = {t.index: np.zeros(E) for t in trace.tokens}
    counts = {t.index: 0 for t in trace.tokens}
    for dec in trace.decisions:
        if block_set is not None and dec.block not in block_set:
            continue
        if proj_set is not None and dec.projection not in proj_set:
            continue
        sums[dec.token_index] += dec.full_weights(E)
        counts[dec.token_index] += 1
    summaries = []
    for tok in trace.tokens:
        n = counts[tok.index]
        if n == 0:
            summaries.append(TokenSummary(tok.index, np.zeros(E), None, 0))
        else:
            w = sums[tok.index] / n
            summaries.append(TokenSummary(tok.index, w, int(np.argmax(w)), n))
    return summaries


def expert_utilization(trace: RoutingTrace,
                       collapse_threshold: float = DEFAULT_COLLAPSE_THRESHOLD) -> dict:
    """Top-1 assignment fractions and mean aggregated weights per expert.

    Flags routing collapse when one expert's top-1 fraction exceeds the
    threshold (default 0.9).
    """
    if not trace.decisions:
        raise EmptyInput("trace has no routing decisions")
    E = trace.num_experts
    counts = np.zeros(E)
    for dec in trace.decisions:
        counts[dec.selected[0]] += 1
    top1 = counts / counts.sum()
    summaries = [s for s in aggregate(trace) if s.site_count > 0]
    mean_weight = np.mean([s.weights for s in summaries], axis=0)
    max_top1 = float(top1.max())
    return {
        "top1_fraction": top1,
        "mean_weight": mean_weight,
        "collapse": {
            "threshold": collapse_threshold,
            "max_top1_fraction": max_top1,
            "expert": int(np.argmax(top1)),
            # collapse means one of SEVERAL experts starves the rest; a
            # single-expert model cannot collapse
            "collapsed": bool(E > 1 and max_top1 > collapse_threshold),
        },
    }


def _utilization_dict(util: dict) -> dict:
    return {
        "top1_fraction": [float(x) for x in util["top1_fraction"]],
        "mean_weight": [float(x) for x in util["mean_weight"]],
        "collapse": dict(util["collapse"]),
    }


def _empty_utilization(threshold: float = DEFAULT_COLLAPSE_THRESHOLD) -> dict:
    return {
        "top1_fraction": [],
        "mean_weight": [],
        "collapse": {
            "threshold": threshold,
            "max_top1_fraction": 0.0,
            "expert": None,
            "collapsed": False,
        },
    }


def trace_document(trace: RoutingTrace, summaries: list[TokenSummary] | None = None,
                   utilization: dict | None = None,
                   filters: dict | None = None) -> dict:
    """Assemble the JSON document served to the visualizer.

    Top-level keys: model, tokens, decisions, summaries, utilization.
    """
    if summaries is None:
        summaries = aggregate(trace)
    if utilization is None:
        utilization = (_utilization_dict(expert_utilization(trace))
                       if trace.decisions else _empty_utilization())
    else:
        utilization = _utilization_dict(utilization)
    return {
        "model": {
            "mode": trace.mode,
            "num_experts": trace.num_experts,
            "num_experts_per_tok": trace.k,
            "routed_blocks": list(trace.routed_blocks),
            "projections": list(trace.projections),
            "expert_names": list(trace.expert_names),
            "filter": {
                "blocks": None if not filters or filters.get("blocks") is None
                else [int(b) for b in filters["blocks"]],
                "projections": None if not filters or filters.get("projections") is None
                else [str(p) for p in filters["projections"]],
            },
        },
        "tokens": [
            {"index": t.index, "id": t.token_id, "text": t.text} for t in trace.tokens
        ],
        "decisions": [
            {
                "token": d.token_index,
                "block": d.block,
                "projection": d.projection,
                "selected": [int(i) for i in d.selected],
                "weights": [float(w) for w in d.weights],
                "logits": [float(g) for g in d.logits],
            }
            for d in trace.decisions
        ],
        "summaries": [
            {
                "token": s.token_index,
                "weights": [float(w) for w in s.weights],
                "dominant": s.dominant,
                "site_count": s.site_count,
            }
            for s in summaries
        ],
        "utilization": utilization,
    }


def export_trace(trace: RoutingTrace, summaries: list[TokenSummary] | None = None,
                 path=None, filters: dict | None = None) -> dict:
    """Serialize the trace document, optionally writing it to disk."""
    doc = trace_document(trace, summaries=summaries, filters=filters)
    if path is not None:
        try:
            Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
        except OSError as exc:
            raise CheckpointIOError(f"writing trace to {path}: {exc}") from exc
    return doc
