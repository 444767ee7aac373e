"""Command-line entry point: generate | search | diagnose | eval | bench.

Every command takes a model path and a tokenizer spec, echoes its fully
resolved configuration into any report it writes, and is deterministic for a
fixed seed (timing fields aside). Exit codes: 0 success, 1 runtime or data
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import decoding, diagnostics, eval_harness, layer_search
from .errors import EngineError
from .model import LayerSet, Model
from .tokenizer import load_tokenizer


class UsageError(Exception):
    """Bad flag combination detected after argparse."""


def _parse_layer_list(text: str) -> LayerSet:
    parts = text.split(",")
    try:
        return LayerSet.of(int(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated layer indices, got {text!r}"
        ) from exc


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, help="PCDW weight file")
    parser.add_argument(
        "--tokenizer", default="byte",
        help='"byte" or a directory containing vocab.json and merges.txt',
    )
    parser.add_argument("--seed", type=int, default=0, help="echoed into reports")


def _add_decode_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=decoding.MODES, default="greedy")
    parser.add_argument("--lambda", dest="lam", type=float, default=0.0,
                        help="contrast strength")
    parser.add_argument("--alpha", type=float, default=0.1,
                        help="plausibility threshold relative to the max probability")
    parser.add_argument("--rep-penalty", type=float, default=1.2)
    parser.add_argument("--max-new", type=int, default=64)
    parser.add_argument("--prune-layers", type=_parse_layer_list, default=None,
                        help="comma-separated amateur pruning set (prunecd)")
    parser.add_argument("--search-report", default=None,
                        help="read the pruning set from a search report JSON")
    parser.add_argument("--dola-bucket", choices=decoding.DOLA_BUCKETS, default="upper")
    parser.add_argument("--stop-eos", action="store_true",
                        help="stop on the tokenizer's EOS id")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunecd")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate text from a prompt")
    _add_common(p)
    _add_decode_flags(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--trace", default=None, help="write per-step traces as JSON lines")

    p = sub.add_parser("search", help="search the pruning set by layer ablation")
    _add_common(p)
    p.add_argument("--mc", required=True, help="MC dataset JSONL")
    p.add_argument("--k", type=int, required=True, help="number of layers to prune")
    p.add_argument("--filter-corpus", default=None,
                   help="plain-text corpus enabling the perplexity pre-filter")
    p.add_argument("--exhaustive", action="store_true",
                   help="exhaustive subset search (tiny models only)")
    p.add_argument("--report", default=None, help="write the search report JSON here")

    p = sub.add_parser("diagnose", help="flatness/informativeness and JSD diagnostics")
    _add_common(p)
    p.add_argument("--prompts", required=True, help="prompts JSONL (one JSON string per line)")
    p.add_argument("--exit-layer", type=int, required=True)
    p.add_argument("--prune-layers", type=_parse_layer_list, required=True)
    p.add_argument("--topk", type=int, default=25)
    p.add_argument("--position", type=int, default=0,
                   help="generated position to probe (0 = first)")
    p.add_argument("--report", default=None)
    p.add_argument("--jsd-csv", default=None,
                   help="write the per-token/per-layer JSD matrix of the first prompt")
    p.add_argument("--histogram", default=None,
                   help="write the bucket exit-layer histogram JSON here")
    p.add_argument("--bucket", choices=decoding.DOLA_BUCKETS, default="upper")
    p.add_argument("--max-new", type=int, default=16,
                   help="tokens generated per prompt for the JSD analyses")

    p = sub.add_parser("eval", help="score MC and/or QA datasets")
    _add_common(p)
    _add_decode_flags(p)
    p.add_argument("--mc", default=None, help="MC dataset JSONL")
    p.add_argument("--qa", default=None, help="QA dataset JSONL")
    p.add_argument("--report", default=None)

    p = sub.add_parser("bench", help="tokens/second of a decode mode")
    _add_common(p)
    _add_decode_flags(p)
    p.add_argument("--prompts", required=True)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--report", default=None)

    return parser


def _resolve_prune_set(args) -> LayerSet | None:
    if args.prune_layers is not None:
        return args.prune_layers
    if args.search_report is not None:
        with open(args.search_report, encoding="utf-8") as f:
            report = layer_search.SearchReport.from_dict(json.load(f))
        return report.chosen
    return None


def _decode_config(args, tokenizer) -> decoding.DecodeConfig:
    prune_set = _resolve_prune_set(args)
    if args.mode == "prunecd" and prune_set is None:
        raise UsageError("prunecd mode requires --prune-layers or --search-report")
    stop_ids = frozenset()
    if args.stop_eos:
        eos = getattr(tokenizer, "eos_id", None)
        if eos is None:
            raise UsageError("--stop-eos: the tokenizer defines no EOS id")
        stop_ids = frozenset([eos])
    return decoding.DecodeConfig(
        mode=args.mode,
        lam=args.lam,
        alpha=args.alpha,
        rep_penalty=args.rep_penalty,
        max_new_tokens=args.max_new,
        prune_set=prune_set,
        dola_bucket=args.dola_bucket,
        stop_ids=stop_ids,
    )


def _config_echo(args, **extra) -> dict:
    echo = {k: v for k, v in vars(args).items() if k != "command"}
    for key, value in list(echo.items()):
        if isinstance(value, LayerSet):
            echo[key] = list(value)
    echo.update(extra)
    return {"command": args.command, **echo}


def _write_json(path: str | None, doc: dict) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _cmd_generate(args) -> int:
    model = Model.load(args.model)
    tokenizer = load_tokenizer(args.tokenizer)
    config = _decode_config(args, tokenizer)
    text, traces = decoding.generate(model, tokenizer, args.prompt, config)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as f:
            decoding.write_traces(traces, f)
    print(text)
    return 0


def _cmd_search(args) -> int:
    model = Model.load(args.model)
    tokenizer = load_tokenizer(args.tokenizer)
    items = eval_harness.load_mc_jsonl(args.mc)
    corpus = None
    if args.filter_corpus:
        text = Path(args.filter_corpus).read_text(encoding="utf-8")
        corpus = layer_search.corpus_windows(text, tokenizer)
    report = layer_search.run_search(
        model, tokenizer, items, k=args.k, filter_corpus=corpus,
        exhaustive=args.exhaustive,
    )
    doc = report.to_dict()
    doc["config"] = _config_echo(args)
    _write_json(args.report, doc)
    print(f"chosen pruning set: {list(report.chosen)}")
    return 0


def _cmd_diagnose(args) -> int:
    model = Model.load(args.model)
    tokenizer = load_tokenizer(args.tokenizer)
    prompts = eval_harness.load_prompts(args.prompts)
    report = diagnostics.flatness_informativeness_sweep(
        model, tokenizer, prompts,
        exit_layer=args.exit_layer,
        prune_set=args.prune_layers,
        k=args.topk,
        position=args.position,
    )
    doc = report.to_dict()
    doc["config"] = _config_echo(args)
    _write_json(args.report, doc)
    if args.jsd_csv:
        config = decoding.DecodeConfig(mode="greedy", max_new_tokens=args.max_new)
        matrix = diagnostics.jsd_matrix(model, tokenizer, prompts[0], config)
        matrix.write_csv(args.jsd_csv)
    if args.histogram:
        counts = diagnostics.exit_layer_histogram(
            model, tokenizer, prompts, args.bucket, max_new_tokens=args.max_new
        )
        _write_json(args.histogram, {
            "config": _config_echo(args),
            "counts": {str(k): v for k, v in counts.items()},
        })
    print(
        f"entropy full/early/pruned: {report.entropy_full:.4f} / "
        f"{report.entropy_early_exit:.4f} / {report.entropy_pruned:.4f}  "
        f"overlap early/pruned: {report.overlap_early_exit:.4f} / "
        f"{report.overlap_pruned:.4f}"
    )
    return 0


def _cmd_eval(args) -> int:
    if not args.mc and not args.qa:
        raise UsageError("eval requires --mc and/or --qa")
    model = Model.load(args.model)
    tokenizer = load_tokenizer(args.tokenizer)
    doc: dict = {"config": _config_echo(args)}
    if args.mc:
        items = eval_harness.load_mc_jsonl(args.mc)
        layers = model.full_layers()
        per_item = [
            layer_search.option_log_likelihoods(model, tokenizer, it, layers)
            for it in items
        ]
        mc1 = layer_search.mc1_from_scores(items, per_item)
        mc_doc = {
            "mc1": mc1,
            "per_item_scores": per_item,
        }
        if all(it.correct_set is not None for it in items):
            _, mc2, mc3 = eval_harness.mc_metrics_from_scores(items, per_item)
            mc_doc["mc2"] = mc2
            mc_doc["mc3"] = mc3
        doc["mc"] = mc_doc
        print(f"MC1 {mc1:.4f}" + (
            f"  MC2 {mc_doc['mc2']:.4f}  MC3 {mc_doc['mc3']:.4f}" if "mc2" in mc_doc else ""
        ))
    if args.qa:
        config = _decode_config(args, tokenizer)
        qa_items = eval_harness.load_qa_jsonl(args.qa)
        rows = []
        for item in qa_items:
            prediction, _ = decoding.generate(model, tokenizer, item.question, config)
            em, f1 = eval_harness.em_f1(prediction, item.gold_answers)
            rows.append({"prediction": prediction, "em": em, "f1": f1})
        mean_em = sum(r["em"] for r in rows) / len(rows)
        mean_f1 = sum(r["f1"] for r in rows) / len(rows)
        doc["qa"] = {"em": mean_em, "f1": mean_f1, "per_item": rows}
        print(f"EM {mean_em:.4f}  F1 {mean_f1:.4f}")
    _write_json(args.report, doc)
    return 0


def _cmd_bench(args) -> int:
    model = Model.load(args.model)
    tokenizer = load_tokenizer(args.tokenizer)
    config = _decode_config(args, tokenizer)
    prompts = eval_harness.load_prompts(args.prompts)
    result = eval_harness.bench(
        model, tokenizer, prompts, config, warmup=args.warmup, model_id=args.model
    )
    doc = {"config": _config_echo(args), "result": result.to_dict()}
    _write_json(args.report, doc)
    print(
        f"{result.mode}: {result.tokens_generated} tokens in "
        f"{result.wall_seconds:.3f}s = {result.tokens_per_second:.1f} tok/s"
    )
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "search": _cmd_search,
    "diagnose": _cmd_diagnose,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (EngineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
