"""Command-line entry point.

Subcommands: prep (extract/split/stats), tok (train/encode), train, chat,
calibrate, eval (selfchat/report), serve. Config files for `train` may be
JSON or TOML; keys split between "model" and "train" tables.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import evalsuite
from .bpe import Vocab, load_vocab, save_vocab, train_bpe
from .checkpoint import load_checkpoint, save_checkpoint
from .graph import (
    SplitSpec,
    extract_discriminator_pairs,
    extract_one_to_many,
    extract_one_to_one,
    graph_stats,
    load_examples,
    load_graph,
    save_examples,
    split_dataset,
    validate_graph,
)
from .nn import ModelConfig, init_parameters
from .runtime import (
    ChatContext,
    DecodeParams,
    calibrate_threshold,
    chat_turn,
    load_models,
    save_calibration_csv,
)
from .training import TRAINERS, TrainPlan

STAGE_ALIASES = {"1": "stage1", "2.1": "stage2_1", "2.2": "stage2_2",
                 "disc": "discriminator"}


def _load_config_file(path: str) -> dict:
    raw = Path(path).read_bytes()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(raw.decode("utf-8"))
    return json.loads(raw.decode("utf-8"))


def _corpus_lines(path: str) -> list[str]:
    """Text lines for tokenizer training; JSONL corpora contribute `text`."""
    lines = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                lines.append(line)
                continue
            if isinstance(rec, dict) and "text" in rec:
                lines.append(str(rec["text"]))
            else:
                lines.append(line)
    return lines


# --- prep --------------------------------------------------------------------


def cmd_prep_extract(args: argparse.Namespace) -> int:
    graph = load_graph(args.graph)
    if args.policy == "one2one":
        examples = extract_one_to_one(graph)
    elif args.policy == "one2many":
        examples = extract_one_to_many(graph)
    else:
        examples = extract_discriminator_pairs(
            graph, negative_ratio=args.negative_ratio, seed=args.seed)
    save_examples(examples, args.out)
    print(f"wrote {len(examples)} {args.policy} examples to {args.out}")
    return 0


def cmd_prep_split(args: argparse.Namespace) -> int:
    parts = [float(x) for x in args.ratios.split(",")]
    if len(parts) != 3:
        raise SystemExit(f"--ratios needs three comma-separated values, got {args.ratios!r}")
    examples = load_examples(getattr(args, "in"))
    spec = SplitSpec(train_fraction=parts[0], valid_fraction=parts[1],
                     test_fraction=parts[2], seed=args.seed)
    train, valid, test = split_dataset(examples, spec)
    prefix = args.out_prefix or str(Path(getattr(args, "in")).with_suffix(""))
    for name, subset in (("train", train), ("valid", valid), ("test", test)):
        path = f"{prefix}.{name}.jsonl"
        save_examples(subset, path)
        print(f"{name}: {len(subset)} examples -> {path}")
    return 0


def cmd_prep_stats(args: argparse.Namespace) -> int:
    graph = load_graph(args.graph)
    report = validate_graph(graph)
    vocab = load_vocab(args.vocab) if args.vocab else None
    out: dict = {"violations": report.violations, "warnings": report.warnings}
    if vocab is not None:
        out["stats"] = dataclasses.asdict(graph_stats(graph, vocab))
    else:
        out["nodes"] = len(graph.nodes)
        out["topics"] = graph.topic_count
    print(json.dumps(out, ensure_ascii=False, indent=1))
    return 0 if not report.violations else 1


# --- tok ---------------------------------------------------------------------


def cmd_tok_train(args: argparse.Namespace) -> int:
    lines = _corpus_lines(args.corpus)
    vocab = train_bpe(lines, args.size, latent_count=args.latents)
    save_vocab(vocab, args.out)
    print(f"trained {len(vocab.pieces)}-piece vocab from "
          f"{len(lines)} lines -> {args.out}")
    return 0


def cmd_tok_encode(args: argparse.Namespace) -> int:
    vocab = load_vocab(args.vocab)
    for line in sys.stdin:
        ids = vocab.encode_text(line.rstrip("\n"))
        print(" ".join(str(i) for i in ids))
    return 0


# --- train ---------------------------------------------------------------------


def _build_plan_and_params(args: argparse.Namespace,
                           vocab: Vocab) -> tuple[TrainPlan, "object"]:
    stage = STAGE_ALIASES[args.stage]
    cfg_file = _load_config_file(args.config) if args.config else {}
    train_kwargs = dict(cfg_file.get("train", {}))
    train_kwargs["stage"] = stage
    plan = TrainPlan(**train_kwargs)
    if args.init:
        params = load_checkpoint(args.init)
    else:
        model_kwargs = dict(cfg_file.get("model", {}))
        model_kwargs.setdefault("vocab_size", len(vocab.pieces))
        params = init_parameters(ModelConfig(**model_kwargs))
    return plan, params


def cmd_train(args: argparse.Namespace) -> int:
    vocab = load_vocab(args.vocab)
    plan, params = _build_plan_and_params(args, vocab)
    data = load_examples(args.data)
    valid = load_examples(args.valid) if args.valid else None
    trainer = TRAINERS[plan.stage]
    params, trace = trainer(plan, params, vocab, data, valid)
    save_checkpoint(params, args.out)
    if args.trace:
        trace.save_csv(args.trace)
    last = trace.rows[-1] if trace.rows else None
    print(f"stage {args.stage}: {len(trace.rows)} trace rows, "
          f"final total={last.total if last else 'n/a'} -> {args.out}")
    return 0


# --- chat ----------------------------------------------------------------------


def cmd_chat(args: argparse.Namespace) -> int:
    models = load_models(args.gen, args.sel, args.disc, args.vocab)
    ctx = ChatContext()
    decode = DecodeParams(max_response_len=args.max_len)
    print("interactive chat; empty line or EOF exits")
    while True:
        try:
            line = input("you> ")
        except EOFError:
            break
        if not line.strip():
            break
        result = chat_turn(models, ctx, line, epsilon=args.epsilon,
                           K=args.k, decode_params=decode)
        ctx = result.ctx
        d = result.decision
        flag = " [switch]" if d and d.switched else ""
        beta = f"{d.beta:.3f}" if d else "-"
        print(f"bot ({beta}){flag}> {result.response}")
    return 0


# --- calibrate -------------------------------------------------------------------


def cmd_calibrate(args: argparse.Namespace) -> int:
    disc = load_checkpoint(args.disc)
    vocab = load_vocab(args.vocab)
    pairs = []
    for ex in load_examples(args.pairs):
        if ex.kind != "topic_pair" or len(ex.context) != 2 or ex.label is None:
            raise SystemExit(f"{args.pairs} holds non-pair examples")
        pairs.append((ex.context[0].text, ex.context[1].text, ex.label))
    result = calibrate_threshold(disc, vocab, pairs)
    save_calibration_csv(result, args.out)
    print(f"{len(result.points)} thresholds -> {args.out}; "
          f"chosen epsilon={result.epsilon!r}")
    return 0


# --- eval --------------------------------------------------------------------------


def cmd_eval_selfchat(args: argparse.Namespace) -> int:
    models = load_models(args.gen, args.sel, args.disc, args.vocab)
    seeds = [line.strip() for line in
             Path(args.seeds).read_text(encoding="utf-8").splitlines()
             if line.strip()]
    run = evalsuite.self_chat(models, seeds, turns=args.turns,
                              epsilon=args.epsilon, K=args.k,
                              switch_enabled=args.switch == "on")
    evalsuite.save_run(run, args.out)
    failed = sum(1 for t in run.transcripts if t.error)
    print(f"{len(run.transcripts)} transcripts ({failed} failed) -> {args.out}")
    return 0


def cmd_eval_report(args: argparse.Namespace) -> int:
    vocab = load_vocab(args.vocab)
    ratings = evalsuite.load_ratings_csv(args.ratings) if args.ratings else None
    reports = [evalsuite.build_report(evalsuite.load_run(path), vocab, ratings)
               for path in args.run]
    if len(reports) == 1:
        evalsuite.save_report(reports[0], args.out)
    else:
        evalsuite.save_report(evalsuite.side_by_side(reports), args.out)
    for rep in reports:
        print(f"{rep.variant}: distinct1={rep.distinct1:.4f} "
              f"distinct2={rep.distinct2:.4f} avg_topics={rep.avg_topics:.2f}")
    print(f"-> {args.out}")
    return 0


# --- serve --------------------------------------------------------------------------


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    models = load_models(args.gen, args.sel, args.disc, args.vocab)
    config = ServiceConfig(
        epsilon=args.epsilon, k=args.k, max_response_len=args.max_len,
        log_dir=args.log_dir,
        cors_origins=tuple(args.cors.split(",")) if args.cors else ("*",),
        checkpoint_dirs={"generator": args.gen, "selector": args.sel,
                         "discriminator": args.disc})
    app = create_app(models, config)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topicchat")
    sub = parser.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prep", help="corpus extraction and splitting")
    prep_sub = prep.add_subparsers(dest="subcommand", required=True)
    p = prep_sub.add_parser("extract")
    p.add_argument("--graph", required=True)
    p.add_argument("--policy", required=True,
                   choices=["one2one", "one2many", "pairs"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negative-ratio", type=float, default=1.0)
    p.set_defaults(func=cmd_prep_extract)
    p = prep_sub.add_parser("split")
    p.add_argument("--in", required=True)
    p.add_argument("--ratios", default="0.9,0.05,0.05")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", default=None)
    p.set_defaults(func=cmd_prep_split)
    p = prep_sub.add_parser("stats")
    p.add_argument("--graph", required=True)
    p.add_argument("--vocab", default=None)
    p.set_defaults(func=cmd_prep_stats)

    tok = sub.add_parser("tok", help="tokenizer training and encoding")
    tok_sub = tok.add_subparsers(dest="subcommand", required=True)
    p = tok_sub.add_parser("train")
    p.add_argument("--corpus", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--latents", type=int, default=5)
    p.set_defaults(func=cmd_tok_train)
    p = tok_sub.add_parser("encode")
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_tok_encode)

    p = sub.add_parser("train", help="run one curriculum stage")
    p.add_argument("--stage", required=True, choices=list(STAGE_ALIASES))
    p.add_argument("--config", default=None, help="JSON or TOML settings")
    p.add_argument("--data", required=True)
    p.add_argument("--valid", default=None)
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("chat", help="interactive debugging REPL")
    p.add_argument("--gen", required=True)
    p.add_argument("--sel", required=True)
    p.add_argument("--disc", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--epsilon", type=float, default=0.61)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-len", type=int, default=16)
    p.set_defaults(func=cmd_chat)

    p = sub.add_parser("calibrate", help="sweep switch thresholds on labeled pairs")
    p.add_argument("--disc", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    ev = sub.add_parser("eval", help="self-chat runs and report building")
    ev_sub = ev.add_subparsers(dest="subcommand", required=True)
    p = ev_sub.add_parser("selfchat")
    p.add_argument("--gen", required=True)
    p.add_argument("--sel", required=True)
    p.add_argument("--disc", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--seeds", required=True, help="file with one seed question per line")
    p.add_argument("--turns", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=0.61)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--switch", choices=["on", "off"], default="on")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_selfchat)
    p = ev_sub.add_parser("report")
    p.add_argument("--run", action="append", required=True,
                   help="run JSON; repeat for a side-by-side report")
    p.add_argument("--vocab", required=True)
    p.add_argument("--ratings", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_report)

    p = sub.add_parser("serve", help="run the HTTP chat service")
    p.add_argument("--gen", required=True)
    p.add_argument("--sel", required=True)
    p.add_argument("--disc", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--epsilon", type=float, default=0.61)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--log-dir", default=None)
    p.add_argument("--cors", default=None, help="comma-separated allowed origins")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
