"""Command-line entry points for the full workflow.

    moefuse init-expert --out DIR --seed 1            # seeded random dense model
    moefuse compose --config cfg.json --out DIR       # merge experts
    moefuse inspect --model DIR                       # manifest summary
    moefuse generate --model DIR --prompt "hi"        # greedy decoding
    moefuse trace --model DIR --prompt "hi" --out t.json
    moefuse stitch-trace --model DIR --prompt "hi" --out s.json
    moefuse train --model DIR --corpus c.txt --steps 50 --lr 2.0 --out DIR2
    moefuse serve --model DIR --port 8080

Every command is a pure function of its inputs and the seed; reruns produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import checkpoint as cp
from .composer import MoeConfig, compose
from .errors import ConfigError, MoeFuseError
from .model import MoeModel, random_dense_checkpoint
from .service import ServeConfig, serve
from .stitch import BtsModel, export_stitch_trace
from .tokenizer import ByteTokenizer, VOCAB_SIZE
from .trace import aggregate, export_trace, expert_utilization
from .training import train


def _load_model(model_dir):
    ckpt = cp.load(model_dir)
    if ckpt.manifest.model_kind == "bts":
        return BtsModel.from_checkpoint(ckpt)
    return MoeModel.from_checkpoint(ckpt)


def _parse_int_list(text):
    return None if text is None else [int(p) for p in text.split(",") if p != ""]


def _parse_str_list(text):
    return None if text is None else [p.strip() for p in text.split(",") if p.strip()]


def cmd_init_expert(args) -> int:
    arch = cp.ArchInfo(vocab_size=args.vocab, d_model=args.d_model,
                       n_blocks=args.n_blocks, n_heads=args.n_heads, d_ff=args.d_ff)
    ckpt = random_dense_checkpoint(arch, seed=args.seed, scale=args.scale,
                                   model_type="toy-dense")
    cp.save(ckpt, args.out)
    print(f"wrote dense checkpoint ({len(ckpt.tensors)} tensors) to {args.out}")
    return 0


def cmd_compose(args) -> int:
    config_path = Path(args.config)
    config = MoeConfig.from_file(config_path)
    if args.seed is not None:
        config.seed = args.seed
    if args.alpha is not None:
        config.alpha = args.alpha
    ckpt, report = compose(config, base_dir=config_path.parent)
    cp.save(ckpt, args.out)
    report_path = Path(args.out) / "report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    print(f"composed {config.moe_method} model from {len(config.experts)} experts "
          f"-> {args.out}")
    print(f"  shared={len(report.shared_param_names)} "
          f"expert={len(report.expert_param_names)} new={len(report.new_param_names)}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = cp.load(args.model)
    m = ckpt.manifest
    print(f"model_kind:  {m.model_kind}")
    print(f"model_type:  {m.model_type}")
    a = m.arch
    print(f"arch:        vocab={a.vocab_size} d_model={a.d_model} "
          f"n_blocks={a.n_blocks} n_heads={a.n_heads} d_ff={a.d_ff}")
    if m.moe is not None:
        if m.model_kind == "bts":
            print(f"experts:     hub + {m.moe.num_experts} stitched "
                  f"({', '.join(m.moe.expert_names)})")
        else:
            print(f"experts:     {m.moe.num_experts} ({', '.join(m.moe.expert_names)})")
        print(f"top-k:       {m.moe.num_experts_per_tok}")
        print(f"alpha:       {m.moe.alpha}")
        print(f"router:      layers={list(m.moe.router_layers)} "
              f"index={list(m.moe.router_layers_index)}")
        if m.moe.stitch_freq is not None:
            print(f"stitch_freq: {m.moe.stitch_freq}")
    print(f"tensors:     {len(m.tensors)} entries, {m.total_bytes} bytes on disk")
    return 0


class ConfigErrorFromField(MoeFuseError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")


def _encode_prompt(prompt: str, tok: ByteTokenizer):
    if prompt == "":
        raise ConfigErrorFromField("prompt", "prompt must not be empty")
    return tok.encode(prompt)


def cmd_generate(args) -> int:
    model = _load_model(args.model)
    tok = ByteTokenizer()
    ids = _encode_prompt(args.prompt, tok)
    out_ids, _ = model.generate(ids, args.max_new, label_fn=tok.token_label)
    print(tok.decode(out_ids))
    return 0


def cmd_trace(args) -> int:
    model = _load_model(args.model)
    tok = ByteTokenizer()
    if isinstance(model, BtsModel):
        raise ConfigErrorFromField(
            "model", "trace needs a traditional or btx model; use stitch-trace for bts")
    ids = _encode_prompt(args.prompt, tok)
    if args.max_new > 0:
        _, trace = model.generate(ids, args.max_new, label_fn=tok.token_label)
    else:
        _, trace = model.forward(ids, label_fn=tok.token_label)
    blocks = _parse_int_list(args.blocks)
    projections = _parse_str_list(args.projections)
    summaries = aggregate(trace, blocks=blocks, projections=projections)
    doc = export_trace(trace, summaries=summaries, path=args.out,
                       filters={"blocks": blocks, "projections": projections})
    util = doc["utilization"]["collapse"]
    print(f"traced {len(trace.tokens)} tokens, {len(trace.decisions)} decisions "
          f"-> {args.out}")
    if util["collapsed"]:
        print(f"  warning: routing collapse, expert {util['expert']} takes "
              f"{util['max_top1_fraction']:.0%} of top-1 picks")
    return 0


def cmd_stitch_trace(args) -> int:
    model = _load_model(args.model)
    tok = ByteTokenizer()
    if not isinstance(model, BtsModel):
        raise ConfigErrorFromField("model", "stitch-trace needs a bts model")
    ids = _encode_prompt(args.prompt, tok)
    if args.max_new > 0:
        _, trace = model.generate(ids, args.max_new, label_fn=tok.token_label)
    else:
        _, trace = model.forward(ids, label_fn=tok.token_label)
    doc = export_stitch_trace(trace)
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
    print(f"traced {len(trace.tokens)} tokens over {len(trace.sites)} stitch sites "
          f"-> {args.out}")
    return 0


def cmd_train(args) -> int:
    model = _load_model(args.model)
    tok = ByteTokenizer()
    lines = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    dataset = [tok.encode(line, add_bos=True, add_eos=True) for line in lines if line]
    if not dataset:
        raise ConfigErrorFromField("corpus", "corpus has no non-empty lines")
    trained, history = train(model, dataset, steps=args.steps, lr=args.lr,
                             alpha=args.alpha)
    out = Path(args.out)
    cp.save(trained.to_checkpoint(), out)
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "ce", "lb", "alpha", "total"])
        for i, bd in enumerate(history):
            writer.writerow([i, repr(bd.ce), repr(bd.lb), repr(bd.alpha), repr(bd.total)])
    first, last = history[0], history[-1]
    print(f"trained {args.steps} steps on {len(dataset)} sequences")
    print(f"  total loss {first.total:.6f} -> {last.total:.6f}")
    print(f"  wrote model + loss.csv to {out}")
    return 0


def cmd_serve(args) -> int:
    config = ServeConfig(model_dir=args.model, host=args.host, port=args.port,
                         max_prompt_bytes=args.max_prompt_bytes,
                         static_dir=args.static_dir)
    serve(config)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moefuse",
                                     description="compose, run, train, and trace "
                                                 "mixture-of-experts models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-expert", help="write a seeded random dense checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=VOCAB_SIZE)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--n-blocks", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=32)
    p.add_argument("--scale", type=float, default=0.6)
    p.set_defaults(func=cmd_init_expert)

    p = sub.add_parser("compose", help="merge expert checkpoints per a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--alpha", type=float, default=None, help="override the config alpha")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("inspect", help="print a checkpoint's manifest summary")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("generate", help="greedy decoding from a prompt")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=32)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("trace", help="record per-token routing to a JSON document")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=0)
    p.add_argument("--blocks", default=None, help="comma-separated block filter")
    p.add_argument("--projections", default=None,
                   help="comma-separated projection filter (gate,up,down,block)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("stitch-trace", help="record stitch gate values for a bts model")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stitch_trace)

    p = sub.add_parser("train", help="gradient descent on routers or stitch tensors")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True, help="text file, one sequence per line")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=None,
                   help="override the manifest's load-balancing weight")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("serve", help="HTTP service for prompts and traces")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--max-prompt-bytes", type=int, default=4096)
    p.add_argument("--static-dir", default=None,
                   help="also serve visualizer files from this directory")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for diag in exc.diagnostics:
            print(f"error: {diag}", file=sys.stderr)
        return 2
    except MoeFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
