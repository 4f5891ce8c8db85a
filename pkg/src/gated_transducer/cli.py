"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (diagnostics on stderr), 2 invalid
configuration or arguments (the message names the offending key).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import traceback

from .config import (
    ConfigError,
    config_hash,
    dataset_kwargs_from,
    model_config_from,
    resolve_config,
    train_config_from,
)
from .data import build_corpus, load_corpus, make_language_specs
from .evaluate import (
    CONDITIONS,
    EvalReport,
    evaluate_ter,
    gate_lid_accuracy,
    run_matrix,
    summarize_report,
    write_report_csv,
    write_report_table,
)
from .model import Model, load_checkpoint
from .seeding import substream
from .training import train
from .verification import format_results, run_gradient_suite, run_oracle_suite

__all__ = ["main"]


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file", default=None)
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config entry (repeatable)",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=1,
        help="worker threads; anything above 1 currently falls back to 1",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gated-transducer",
        description="Streaming multilingual transducer experiments on synthetic data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _add_common(p)
    p.add_argument("--out", help="dataset directory (default: paths.data_dir)")
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write checkpoint + metrics")
    _add_common(p)
    p.add_argument("--data", help="dataset directory (default: paths.data_dir)")
    p.add_argument("--out", help="output directory (default: paths.out_dir)")
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="write wall_ms=0 so metrics bytes depend only on seed and config",
    )
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: paths.data_dir)")
    p.add_argument("--out", help="output directory (default: paths.out_dir)")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("compare", help="train and evaluate the condition matrix")
    _add_common(p)
    p.add_argument("--data", help="dataset directory (default: paths.data_dir)")
    p.add_argument("--out", help="output directory (default: paths.out_dir)")
    p.add_argument("--conditions", help=f"comma list from {sorted(CONDITIONS)}")
    p.add_argument("--seeds", help="comma list of seed entries")
    p.set_defaults(handler=_cmd_compare)

    p = sub.add_parser("grad-check", help="run the finite-difference suite")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_grad_check)

    p = sub.add_parser("oracle-check", help="run the transducer enumeration suite")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=120)
    p.set_defaults(handler=_cmd_oracle_check)

    p = sub.add_parser("show-config", help="print the fully-resolved configuration")
    _add_common(p)
    p.set_defaults(handler=_cmd_show_config)

    return parser


def _ensure_dataset(config, data_dir):
    """Load the corpus at data_dir, generating it first if absent."""
    manifest_path = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(manifest_path):
        print(f"dataset not found at {data_dir}; generating it", file=sys.stderr)
        _generate_dataset(config, data_dir)
    return load_corpus(data_dir)


def _generate_dataset(config, out_dir):
    kwargs = dataset_kwargs_from(config)
    specs, _ = make_language_specs(
        kwargs["n_languages"],
        kwargs["vocab_per_lang"],
        kwargs["feature_dim"],
        kwargs["confusability"],
        substream(kwargs["seed"], "prototypes"),
        kwargs["min_frames"],
        kwargs["max_frames"],
        kwargs["noise_sigma"],
    )
    return build_corpus(
        specs,
        out_dir,
        kwargs["seed"],
        kwargs["train_per_lang"],
        kwargs["test_per_lang"],
        kwargs["token_range"],
        extra_manifest={"config_hash": config_hash(config)},
    )


def _cmd_gen_data(args, config):
    out_dir = args.out or config["paths"]["data_dir"]
    manifest = _generate_dataset(config, out_dir)
    print(f"wrote dataset to {out_dir}")
    for key in sorted(manifest):
        print(f"  {key}={manifest[key]}")
    return 0


def _cmd_train(args, config):
    data_dir = args.data or config["paths"]["data_dir"]
    out_dir = args.out or config["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    corpus = _ensure_dataset(config, data_dir)
    model_config = model_config_from(config)
    run_config = train_config_from(
        config,
        metrics_path=os.path.join(out_dir, "metrics.csv"),
        checkpoint_path=os.path.join(out_dir, "checkpoint.bin"),
    )
    if args.deterministic:
        run_config = dataclasses.replace(run_config, log_wall_time=False)
    model = Model(model_config, run_config.seed)
    result = train(model, run_config, corpus["train"])
    last = result.metrics[-1]
    print(
        f"trained {model_config.variant} for {result.final_step} steps; "
        f"final loss {last['loss_total']:.4f}"
    )
    print(f"metrics: {run_config.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_evaluate(args, config):
    data_dir = args.data or config["paths"]["data_dir"]
    out_dir = args.out or config["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    corpus = _ensure_dataset(config, data_dir)
    model, step, extra = load_checkpoint(args.checkpoint)
    evaluation = config["evaluation"]
    eval_lid = "onehot" if model.config.variant == "oracle-lid" else "allones"
    ters, avg, tokens = evaluate_ter(
        model, corpus["test"], eval_lid, evaluation["max_symbols_per_frame"]
    )
    gate_acc = None
    if model.has_gates:
        test_utts = [u for lang in sorted(corpus["test"]) for u in corpus["test"][lang]]
        gate_acc = gate_lid_accuracy(model, test_utts, evaluation["gate_mode"])
    report = EvalReport(
        [model.config.variant], [model.seed], extra.get("config_hash", config_hash(config))
    )
    report.rows.append(
        {
            "condition": model.config.variant,
            "seed": model.seed,
            "failed": False,
            "error": "",
            "ter_by_lang": ters,
            "tokens_by_lang": tokens,
            "avg_ter": avg,
            "params": sum(p.values.size for p in model.parameters().values()),
            "gate_acc": gate_acc,
        }
    )
    write_report_csv(report, os.path.join(out_dir, "report.csv"))
    write_report_table(report, os.path.join(out_dir, "report.txt"))
    print(f"checkpoint step {step}; avg TER {avg:.4f}")
    for lang in sorted(ters):
        print(f"  lang {lang}: TER {ters[lang]:.4f}")
    if gate_acc is not None:
        print(f"  gate LID accuracy {gate_acc:.4f}")
    print(f"report: {os.path.join(out_dir, 'report.csv')}")
    return 0


def _cmd_compare(args, config):
    data_dir = args.data or config["paths"]["data_dir"]
    out_dir = args.out or config["paths"]["out_dir"]
    corpus = _ensure_dataset(config, data_dir)
    evaluation = config["evaluation"]
    conditions = (
        [c.strip() for c in args.conditions.split(",") if c.strip()]
        if args.conditions
        else evaluation["conditions"]
    )
    seeds = (
        [int(s) for s in args.seeds.split(",") if s.strip()]
        if args.seeds
        else evaluation["seeds"]
    )
    # Timing is never logged here: two compares with one seed must agree
    # byte for byte.
    template = dataclasses.replace(train_config_from(config), log_wall_time=False)
    report = run_matrix(
        model_config_from(config),
        corpus,
        conditions,
        seeds,
        template,
        out_dir=out_dir,
        max_symbols_per_frame=evaluation["max_symbols_per_frame"],
        gate_mode=evaluation["gate_mode"],
        log=lambda message: print(message, file=sys.stderr),
    )
    for name, entry in summarize_report(report).items():
        acc = entry["median_gate_acc"]
        acc_text = "" if acc is None else f"  gate_acc={acc:.4f}"
        print(
            f"{name:<32} median avg_ter={entry['median_avg_ter']:.4f}"
            f"  params={entry['params']}{acc_text}"
        )
    print(f"report: {os.path.join(out_dir, 'report.csv')}")
    return 0


def _cmd_grad_check(args, config):
    results = run_gradient_suite(seed=args.seed)
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


def _cmd_oracle_check(args, config):
    results = run_oracle_suite(seed=args.seed, cases=args.cases)
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


def _cmd_show_config(args, config):
    print(json.dumps(config, indent=2, sort_keys=True))
    print(f"# hash={config_hash(config)}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args.config, args.set)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.threads > 1:
        print("note: --threads > 1 is not implemented; running single-threaded",
              file=sys.stderr)
    try:
        return args.handler(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
