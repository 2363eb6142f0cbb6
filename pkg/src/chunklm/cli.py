"""Command-line surface.

Commands: train, eval-bpb, segment, eval-seg, corrupt, stats, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Errors print a one-line message, never a traceback.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import RunConfig, load_config
from .errors import DataError, NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(obj, out_path: str | None) -> None:
    text = json.dumps(obj, ensure_ascii=False, indent=2)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _load_model(path: str):
    from .checkpoint import load_checkpoint

    model, config, step = load_checkpoint(path)
    return model, config, step


def _cmd_train(args) -> int:
    from .corpus import CorpusManifest, load_corpus
    from .evaluation import bits_per_byte
    from .trainer import train

    config = load_config(args.config) if args.config else RunConfig()
    if args.corpus:
        from .config import config_from_flat, config_to_flat

        flat = config_to_flat(config)
        flat["data.corpus"] = list(args.corpus)
        config = config_from_flat(flat)
    if args.steps is not None:
        config.train.total_steps = args.steps
    if args.out:
        config.out_dir = args.out
    if not config.data.corpus:
        raise DataError("no corpus configured; pass --corpus or set data.corpus")

    manifest = CorpusManifest(
        sources=config.data.corpus,
        fractions=(
            config.data.train_fraction,
            config.data.val_fraction,
            config.data.test_fraction,
        ),
        seed=config.data.split_seed,
    )
    splits = load_corpus(manifest)
    train_docs = list(splits["train"])
    if not train_docs:
        raise DataError("train split is empty")
    result = train(config, train_docs, out_dir=config.out_dir)
    summary = {
        "steps": result.steps,
        "final_checkpoint": result.final_checkpoint,
        "metrics": result.metrics_path,
        "final_total": result.last_record.get("total"),
        "train_bpb": bits_per_byte(result.model, train_docs),
    }
    _emit(summary, args.out_json)
    return EXIT_OK


def _cmd_eval_bpb(args) -> int:
    from .corpus import load_documents
    from .evaluation import bits_per_byte

    model, _, _ = _load_model(args.checkpoint)
    docs = load_documents(args.corpus)
    if not docs:
        raise DataError("corpus holds no documents")
    bpb = bits_per_byte(model, docs)
    _emit(
        {"bpb": bpb, "documents": len(docs), "bytes": int(sum(len(d) for d in docs))},
        args.out,
    )
    return EXIT_OK


def _cmd_segment(args) -> int:
    from .corpus import load_documents

    model, _, _ = _load_model(args.checkpoint)
    docs = load_documents(args.corpus)
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for seq in docs:
            boundaries = model.segment(seq, level=args.level)
            sink.write(
                json.dumps(
                    {"doc_id": seq.doc_id, "boundaries": [int(b) for b in boundaries]}
                )
                + "\n"
            )
    finally:
        if args.out:
            sink.close()
    return EXIT_OK


def _read_jsonl(path: str) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
    return rows


def _cmd_eval_seg(args) -> int:
    from .byte_frontend import encode_document
    from .evaluation import segmentation_prf

    gold_rows = _read_jsonl(args.gold)
    for i, row in enumerate(gold_rows):
        if "boundaries" not in row:
            raise DataError(f'{args.gold}: row missing "boundaries"')
        if "text" in row:
            doc_len = len(row["text"].encode("utf-8"))
            bad = [b for b in row["boundaries"] if not 0 <= int(b) < doc_len]
            if bad:
                raise DataError(
                    f"{args.gold}: row {i} has boundaries {bad[:3]} outside the "
                    f"{doc_len}-byte document"
                )

    if args.pred:
        pred_rows = _read_jsonl(args.pred)
        if len(pred_rows) != len(gold_rows):
            raise DataError(
                f"{len(pred_rows)} predictions for {len(gold_rows)} gold documents"
            )
        predicted = [row.get("boundaries", []) for row in pred_rows]
    else:
        model, _, _ = _load_model(args.checkpoint)
        predicted = []
        for row in gold_rows:
            if "text" not in row:
                raise DataError(f'{args.gold}: row missing "text" (needed to segment)')
            seq = encode_document(row["text"])
            predicted.append(model.segment(seq, level=args.level))

    tp = pred_n = gold_n = 0
    for pred, row in zip(predicted, gold_rows):
        r = segmentation_prf(pred, row["boundaries"])
        tp += r.true_positives
        pred_n += r.predicted
        gold_n += r.gold
    if pred_n == 0 and gold_n == 0:
        precision = recall = f1 = 1.0
    else:
        precision = tp / pred_n if pred_n else 0.0
        recall = tp / gold_n if gold_n else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    _emit(
        {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "documents": len(gold_rows),
        },
        args.out,
    )
    return EXIT_OK


def _cmd_corrupt(args) -> int:
    from .corruption import CorruptionSpec, apply_corruption, load_tables

    spec = CorruptionSpec(kind=args.kind, rate=args.rate, seed=args.seed)
    tables = load_tables(args.tables) if args.tables else None
    jsonl = args.infile.endswith(".jsonl")
    with open(args.infile, "r", encoding="utf-8") as src, open(
        args.outfile, "w", encoding="utf-8"
    ) as dst:
        for line in src:
            line = line.rstrip("\n")
            if not line:
                continue
            if jsonl:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{args.infile}: malformed JSONL ({exc})") from exc
                # boundaries no longer align after corruption, so drop them
                dst.write(
                    json.dumps(
                        {"text": apply_corruption(obj["text"], spec, tables)},
                        ensure_ascii=False,
                    )
                    + "\n"
                )
            else:
                dst.write(apply_corruption(line, spec, tables) + "\n")
    return EXIT_OK


def _cmd_stats(args) -> int:
    from .corpus import load_documents
    from .evaluation import chunk_statistics, compression_ratio

    model, _, _ = _load_model(args.checkpoint)
    docs = load_documents(args.corpus)
    if not docs:
        raise DataError("corpus holds no documents")
    lexicon = None
    if args.lexicon:
        with open(args.lexicon, "r", encoding="utf-8") as fh:
            lexicon = json.load(fh)
    stats = chunk_statistics(model, docs, lexicon)
    ratios = compression_ratio(model, docs)
    _emit(
        {
            "compression_ratio": ratios,
            "length_histogram": {str(k): v for k, v in stats.length_histogram.items()},
            "category_frequency": stats.category_frequency,
            "category_mean_length": stats.category_mean_length,
            "total_chunks": stats.total_chunks,
        },
        args.out,
    )
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .diagnostics import end_to_end_gradcheck, primitive_checks

    failed = False
    for line in primitive_checks(seed=args.seed, shapes_per_op=args.shapes):
        status = "ok  " if line.ok else "FAIL"
        print(f"{status} {line.name:20s} max_rel={line.max_rel_error:.3e} "
              f"({line.checked} elements)")
        failed = failed or not line.ok
    rep = end_to_end_gradcheck()
    status = "ok  " if rep.ok else "FAIL"
    print(f"{status} end_to_end           max_rel={rep.max_rel_error:.3e} "
          f"({rep.elements_checked} elements, {rep.zero_rows_verified} zero rows)")
    failed = failed or not rep.ok
    if failed:
        raise NumericError("gradient check failed")
    return EXIT_OK


def _usage(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def build_parser() -> _Parser:
    parser = _Parser(prog="chunklm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--corpus", nargs="+", help="corpus files (overrides data.corpus)")
    p.add_argument("--steps", type=int, help="override train.total_steps")
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--out-json", dest="out_json", help="write the summary JSON here")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval-bpb", help="bits per byte over a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_eval_bpb)

    p = sub.add_parser("segment", help="predicted byte boundaries per document")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_segment)

    p = sub.add_parser("eval-seg", help="score boundaries against a gold file")
    p.add_argument("--gold", required=True, help="JSONL with text + boundaries")
    p.add_argument("--pred", help="JSONL with predicted boundaries")
    p.add_argument("--checkpoint", help="segment the gold texts with this model")
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_eval_seg)

    p = sub.add_parser("corrupt", help="apply a corruption transform to a corpus")
    p.add_argument("--kind", required=True,
                   choices=("zwnj", "diacritic", "substitution", "reorder"))
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.add_argument("--tables", help="JSON override for character tables")
    p.set_defaults(fn=_cmd_corrupt)

    p = sub.add_parser("stats", help="chunk statistics and compression ratios")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--lexicon", help="JSON mapping chunk text to category")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", type=int, default=5, help="random shapes per primitive")
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "eval-seg" and bool(args.pred) == bool(args.checkpoint):
            return _usage("eval-seg needs exactly one of --pred or --checkpoint")
        return args.fn(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        return _usage(str(exc))
    except Exception as exc:  # never a crash dump
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
