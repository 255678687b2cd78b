"""Command line entry point: annotate, train, explain, evaluate, kappa.

Exit codes: 0 success, 1 internal invariant failure, 2 bad user input.
Summaries are printed as ``key=value`` pairs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from typing import Sequence

import numpy as np

from . import corpus, lime, metrics, model
from .annotator import annotate_with_trace
from .corpus import AnnotatedUtterance, FormatError, RecordError


class UsageError(Exception):
    """Bad user input; exit code 2."""


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def _say(**pairs) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in pairs.items()))


def _open_read(path: str):
    try:
        return open(path, encoding="utf-8")
    except OSError as err:
        raise UsageError(f"cannot read {path}: {err.strerror}") from None


def _open_write(path: str):
    try:
        return open(path, "w", encoding="utf-8", newline="\n")
    except OSError as err:
        raise UsageError(f"cannot write {path}: {err.strerror}") from None


def _read_corpus(path: str) -> corpus.Dataset:
    with _open_read(path) as fh:
        try:
            return corpus.read_jsonl(fh)
        except (FormatError, RecordError) as err:
            raise UsageError(f"{path}: {err}") from None


def _read_model(path: str) -> model.ClassifierParams:
    with _open_read(path) as fh:
        try:
            return model.load_model(fh)
        except (ValueError, KeyError) as err:
            raise UsageError(f"{path}: invalid model file ({err})") from None


def cmd_annotate(args) -> int:
    with _open_read(args.input) as fh:
        try:
            dataset = corpus.parse_conllu(fh, max_len=args.max_len)
        except FormatError as err:
            raise UsageError(f"{args.input}: {err}") from None
    annotated, traces = [], []
    for utt in dataset.records:
        rec, trace = annotate_with_trace(utt)
        annotated.append(rec)
        traces.append(trace.to_json(utt.id))
    with _open_write(args.output) as out:
        corpus.write_jsonl(annotated, out)
    if args.trace:
        with _open_write(args.trace) as out:
            for t in traces:
                out.write(json.dumps(t, separators=(",", ":")) + "\n")
    stats = dataset.stats
    for rid, reason in stats.rejected:
        print(f"rejected id={rid} reason={reason!r}", file=sys.stderr)
    mean_len = float(np.mean([sum(r.mask) for r in annotated])) if annotated else 0.0
    _say(
        records=len(annotated),
        multi_intent_dropped=stats.multi_intent,
        truncated=stats.truncated,
        rejected=len(stats.rejected),
        all_zero_masks=sum(t["degenerate"] for t in traces),
        mean_mask_len=mean_len,
    )
    return 0


def cmd_train(args) -> int:
    dataset = _read_corpus(args.corpus)
    if args.lam > 0:
        for rec in dataset.records:
            if not isinstance(rec, AnnotatedUtterance):
                raise UsageError(f"record {rec.id} has no explanation_mask but --lambda > 0")
    if len(dataset.labels) < 2:
        raise UsageError("training needs at least two intent labels")
    try:
        config = model.TrainConfig(
            lam=args.lam,
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            ig_steps=args.ig_steps,
            seed=args.seed,
            max_len=args.max_len,
            dim=args.dim,
        )
    except ValueError as err:
        raise UsageError(str(err)) from None
    params = model.train(dataset, config)
    with _open_write(args.model) as out:
        model.save_model(params, out)
    final = model.dataset_losses(params, dataset.records, config.lam, config.max_len)
    _say(records=len(dataset), epochs=config.epochs, ce=final["ce"], prior=final["prior"], joint=final["joint"])
    return 0


def _check_labels(params, dataset) -> None:
    unknown = sorted(set(dataset.labels) - set(params.vocab.labels))
    if unknown:
        raise UsageError(f"corpus labels not in model: {', '.join(unknown)}")


def cmd_explain(args) -> int:
    params = _read_model(args.model)
    dataset = _read_corpus(args.corpus)
    _check_labels(params, dataset)
    fn = model.predict_fn(params, args.max_len)
    lime_cfg = lime.LimeConfig(num_samples=args.lime_samples, seed=args.seed)
    with _open_write(args.output) as out:
        for rec in dataset.records:
            tokens = rec.forms[: args.max_len]
            if args.method == "ig":
                amap = model.attribution_map(params, params.vocab.encode(tokens, args.max_len), rec.id, args.ig_steps)
                attributions, probs, pred = amap.attributions, amap.probabilities, amap.predicted_class
            else:
                attributions, probs, pred = lime.lime_explain(fn, tokens, None, lime_cfg, record_id=rec.id)
            row = {
                "id": rec.id,
                "method": args.method,
                "predicted_class": params.vocab.labels[pred],
                "probabilities": [float(p) for p in probs],
                "attributions": [float(a) for a in attributions],
            }
            out.write(json.dumps(row, separators=(",", ":")) + "\n")
    _say(records=len(dataset), method=args.method)
    return 0


def _read_attributions(path: str) -> dict[str, dict]:
    rows = {}
    with _open_read(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows[str(obj["id"])] = obj
            except (json.JSONDecodeError, KeyError, TypeError):
                raise UsageError(f"{path}: line {line_no}: malformed attribution record") from None
    return rows


def cmd_evaluate(args) -> int:
    params = _read_model(args.model)
    dataset = _read_corpus(args.corpus)
    _check_labels(params, dataset)
    attributions = _read_attributions(args.attributions)
    missing = [r.id for r in dataset.records if r.id not in attributions]
    if missing:
        raise UsageError(f"no attributions for ids: {', '.join(missing)}")
    instances = []
    for rec in dataset.records:
        if not isinstance(rec, AnnotatedUtterance):
            raise UsageError(f"record {rec.id} has no explanation_mask")
        tokens = rec.forms[: args.max_len]
        attr = attributions[rec.id]["attributions"]
        if len(attr) != len(tokens):
            raise UsageError(f"record {rec.id}: {len(attr)} attributions for {len(tokens)} tokens")
        instances.append((tokens, rec.intent, rec.mask[: args.max_len], attr))
    report = metrics.evaluate(model.predict_fn(params, args.max_len), params.vocab.labels, instances, args.k)
    methods = sorted({attributions[r.id].get("method", "?") for r in dataset.records})
    report.config.update(method=",".join(methods), max_len=args.max_len)
    with _open_write(args.output) as out:
        json.dump(report.to_json(), out, indent=2)
        out.write("\n")
    _say(
        accuracy=report.accuracy,
        token_f1=report.token_f1,
        iou_f1=report.iou_f1,
        comprehensiveness=report.comprehensiveness,
        sufficiency=report.sufficiency,
    )
    for label, s in report.per_class.items():
        _say(**{"class": label, "precision": s.precision, "recall": s.recall, "f1": s.f1, "samples": s.support})
    return 0


def cmd_kappa(args) -> int:
    with _open_read(args.ratings) as fh:
        rows = [row for row in csv.reader(fh, delimiter="\t") if any(cell.strip() for cell in row)]
    rows = [[cell.strip() for cell in row] for row in rows]
    try:
        table, _ = metrics.agreement_table(rows)
        result = metrics.fleiss(table)
    except (ValueError, ZeroDivisionError) as err:
        raise UsageError(str(err)) from None
    _say(kappa=result.kappa, p_bar=result.p_bar, p_e=result.p_e, N=result.items, n=result.raters)
    return 0


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intent-rationale", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-record warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", help="silver explanation masks from a CoNLL-U corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--trace", help="optional per-utterance traversal trace (JSONL)")
    p.add_argument("--max-len", type=positive_int, default=corpus.MAX_LEN)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", help="train the classifier with the joint loss")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=positive_int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--ig-steps", type=positive_int, default=50)
    p.add_argument("--max-len", type=positive_int, default=corpus.MAX_LEN)
    p.add_argument("--dim", type=positive_int, default=64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="per-token attributions (IG or LIME)")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--method", choices=("ig", "lime"), default="ig")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ig-steps", type=positive_int, default=50)
    p.add_argument("--lime-samples", type=positive_int, default=lime.DEFAULT_NUM_SAMPLES)
    p.add_argument("--max-len", type=positive_int, default=corpus.MAX_LEN)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="plausibility, faithfulness and accuracy report")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--attributions", required=True)
    p.add_argument("--k", type=positive_int, default=5)
    p.add_argument("--output", required=True)
    p.add_argument("--max-len", type=positive_int, default=corpus.MAX_LEN)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("kappa", help="Fleiss' kappa from a ratings TSV (rows = items)")
    p.add_argument("--ratings", required=True)
    p.set_defaults(func=cmd_kappa)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
