"""Command-line surface: ingest, corpus, vocab, train, adapt, eval, attention, run.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
HGMLM_THREADS caps BLAS parallelism and must be applied before numpy is
imported, so all heavy imports happen inside the handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _apply_thread_cap():
    cap = os.environ.get("HGMLM_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hgmlm", description="Metapath corpora and constrained masked-LM training")
    parser.add_argument("--config", help="TOML file with default flag values")
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="load a dataset bundle and write a binary graph file")
    p.add_argument("--bundle", required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("corpus", help="build a JSONL task corpus from a graph")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--bundle")
    src.add_argument("--graph")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--tasks", default="nc,lp", help="comma-separated subset of nc,lp")
    p.add_argument("--mode", default="both", choices=["both", "attr", "struct"])
    p.add_argument("--k", type=int, default=3, help="instances sampled per metapath")
    p.add_argument("--format", default="metapath", choices=["metapath", "flat"])
    p.add_argument("--negative-ratio", type=float, default=1.0)

    p = sub.add_parser("vocab", help="build the token vocabulary from corpora")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--min-count", type=int, default=1)

    for name, desc in (("train", "fine-tune on corpora"), ("adapt", "K-shot adaptation of a checkpoint")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--corpus", nargs="+", required=True)
        p.add_argument("--vocab", required=True)
        p.add_argument("-o", "--output", required=True)
        if name == "adapt":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--shots", type=int, required=True)
        else:
            p.add_argument("--layers", type=int, default=4)
            p.add_argument("--heads", type=int, default=8)
            p.add_argument("--dim", type=int, default=256)
            p.add_argument("--ffn", type=int, default=1024)
            p.add_argument("--dropout", type=float, default=0.1)
        p.add_argument("--max-length", type=int, default=512)
        p.add_argument("--lr", type=float, default=1e-5)
        p.add_argument("--weight-decay", type=float, default=0.01)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--epochs", type=int, default=3)
        p.add_argument("--grad-clip", type=float, default=0.0)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--metrics", default="f1,auc")
    p.add_argument("--max-length", type=int, default=512)
    p.add_argument("--unconstrained", action="store_true", help="predict from the full vocabulary")
    p.add_argument("-o", "--output")

    p = sub.add_parser("attention", help="export mask-position attention for one entry")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--entry", required=True, help="entry id")
    p.add_argument("--max-length", type=int, default=512)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("run", help="run a full experiment plan")
    p.add_argument("--plan", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--checkpoint-dir")
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    config_path = _prescan_config(argv)
    if config_path:
        _load_flag_defaults(parser, config_path)
    args = parser.parse_args(argv)
    resolved = {k: v for k, v in sorted(vars(args).items()) if v is not None}
    print("resolved config: " + json.dumps(resolved, default=str))
    from .errors import DataError, NumericError

    try:
        handler = _HANDLERS[args.command]
        handler(args)
        return 0
    except (DataError, OSError) as e:
        print(f"hgmlm: data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"hgmlm: numeric error: {e}", file=sys.stderr)
        return 3


def _prescan_config(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _load_flag_defaults(parser, path):
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as fh:
        parser.set_defaults(**tomllib.load(fh))


def _cmd_ingest(args):
    from .ingest import load_bundle, write_graph_file

    graph, labels, metapaths, manifest = load_bundle(args.bundle)
    write_graph_file(args.output, graph, labels, metapaths, manifest)
    print(f"wrote {args.output}: {graph.n_nodes} nodes, {len(graph.edges)} edges")


def _load_graph_source(args):
    if args.bundle:
        from .ingest import load_bundle

        return load_bundle(args.bundle)
    from .ingest import read_graph_file

    return read_graph_file(args.graph)


def _cmd_corpus(args):
    from . import corpus as corpus_mod
    from .corpus import NO_EDGE_LABEL, TaskSpec, mask_entry, write_corpus
    from .formats import flatten_to_text, hetero_to_flat
    from .textualize import TextMode

    graph, labels, metapaths, manifest = _load_graph_source(args)
    mode = TextMode(args.mode)
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    prefix_fn = None
    if args.format == "flat":
        flat = hetero_to_flat(graph)
        sep = " </s> "

        def prefix_fn(g, v):
            return sep.join(flatten_to_text(flat, v).splitlines()) + " </s>"

    entries = []
    for task in tasks:
        if task == corpus_mod.TASK_NC:
            spec = TaskSpec(task, manifest.dataset_name, list(manifest.category_labels))
            built = corpus_mod.build_nc_entries(
                graph, labels, spec, metapaths, args.k, args.seed, mode, prefix_fn=prefix_fn
            )
        elif task == corpus_mod.TASK_LP:
            edge_names = [graph.edge_type_names[i] for i in sorted(graph.edge_type_names)]
            spec = TaskSpec(task, manifest.dataset_name, edge_names + [NO_EDGE_LABEL], args.negative_ratio)
            built = corpus_mod.build_lp_entries(
                graph, spec, metapaths, args.k, args.seed, mode, prefix_fn=prefix_fn
            )
        else:
            from .errors import DataError

            raise DataError(f"unknown task {task!r}")
        entries.extend(mask_entry(e) for e in built)
    write_corpus(args.output, entries)
    print(f"wrote {args.output}: {len(entries)} entries")


def _cmd_vocab(args):
    from .corpus import read_corpus
    from .tokenizer import build_vocab

    texts, labels = [], set()
    for path in args.corpus:
        for e in read_corpus(path):
            texts.append(e.text)
            labels.update(e.vocab)
    vocab = build_vocab(texts, sorted(labels), args.min_count)
    vocab.save_tsv(args.output)
    print(f"wrote {args.output}: {vocab.size} tokens ({len(vocab.label_ids)} labels)")


def _train_config(args):
    from .model import TrainConfig

    return TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        grad_clip_norm=args.grad_clip,
        seed=args.seed,
    )


def _read_entries(paths):
    from .corpus import read_corpus

    entries = []
    for path in paths:
        entries.extend(read_corpus(path))
    return entries


def _cmd_train(args):
    from .model import ModelConfig, init_state, save_checkpoint
    from .pipeline import finetune
    from .tokenizer import Vocab, encode

    vocab = Vocab.load_tsv(args.vocab)
    entries = _read_entries(args.corpus)
    cfg = ModelConfig(
        vocab_size=vocab.size,
        layers=args.layers,
        heads=args.heads,
        model_dim=args.dim,
        ffn_dim=args.ffn,
        max_length=args.max_length,
        dropout=args.dropout,
        seed=args.seed,
    )
    state = init_state(cfg)
    tokenized = [encode(e, vocab, args.max_length) for e in entries]
    state, losses = finetune(state, tokenized, _train_config(args))
    save_checkpoint(state, args.output)
    loss_str = ", ".join(f"{x:.4f}" for x in losses)
    print(f"wrote {args.output}: {len(tokenized)} entries, epoch losses [{loss_str}]")


def _cmd_adapt(args):
    from .model import load_checkpoint, save_checkpoint
    from .pipeline import adapt
    from .tokenizer import Vocab

    vocab = Vocab.load_tsv(args.vocab)
    state = load_checkpoint(args.checkpoint)
    entries = _read_entries(args.corpus)
    state, shots, _rest = adapt(state, entries, args.shots, vocab, _train_config(args), args.max_length)
    save_checkpoint(state, args.output)
    print(f"wrote {args.output}: adapted on {len(shots)} shot entries")


def _cmd_eval(args):
    from .corpus import TASK_LP
    from .metrics import auc_ap, micro_macro_f1, per_class_report
    from .model import load_checkpoint
    from .pipeline import evaluate_entries
    from .tokenizer import Vocab

    vocab = Vocab.load_tsv(args.vocab)
    state = load_checkpoint(args.checkpoint)
    entries = _read_entries(args.corpus)
    wanted = {m.strip() for m in args.metrics.split(",") if m.strip()}
    report = {}
    for task in sorted({e.task for e in entries}):
        subset = [e for e in entries if e.task == task]
        preds, golds, scores, binary = evaluate_entries(
            state, subset, vocab, args.max_length, constrained=not args.unconstrained
        )
        class_set = list(subset[0].vocab)
        section = {"n": len(subset)}
        if "f1" in wanted:
            micro, macro = micro_macro_f1(preds, golds, class_set)
            section["micro_f1"] = micro
            section["macro_f1"] = macro
            section["per_class"] = per_class_report(preds, golds, class_set)
        if "auc" in wanted and task == TASK_LP and len(set(binary)) == 2:
            auc, ap = auc_ap(scores, binary)
            section["auc"] = auc
            section["ap"] = ap
        report[task] = section
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    print(text)


def _cmd_attention(args):
    from .corpus import read_corpus
    from .errors import DataError
    from .model import export_attention, load_checkpoint
    from .tokenizer import Vocab, encode

    vocab = Vocab.load_tsv(args.vocab)
    state = load_checkpoint(args.checkpoint)
    match = [e for e in read_corpus(args.corpus) if e.entry_id == args.entry]
    if not match:
        raise DataError(f"entry {args.entry!r} not found in {args.corpus}")
    tok = encode(match[0], vocab, args.max_length)
    result = export_attention(state, tok, vocab)
    result["entry_id"] = args.entry
    with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.output}")


def _cmd_run(args):
    from .pipeline import load_plan, run_experiment, write_report

    plan = load_plan(args.plan)
    report = run_experiment(plan, checkpoint_dir=args.checkpoint_dir)
    write_report(report, args.output)
    print(f"wrote {args.output}")


_HANDLERS = {
    "ingest": _cmd_ingest,
    "corpus": _cmd_corpus,
    "vocab": _cmd_vocab,
    "train": _cmd_train,
    "adapt": _cmd_adapt,
    "eval": _cmd_eval,
    "attention": _cmd_attention,
    "run": _cmd_run,
}


if __name__ == "__main__":
    sys.exit(main())
