"""Greedy decoding, token error rate, and the trained-system comparison matrix.

TER is micro-averaged: a language's score is total edit distance over total
reference tokens, and the report's average column is the token-count-weighted
mean of the per-language scores, i.e. the corpus-level rate. Recomputing the
average from the per-language entries and their token counts reproduces the
stored value.
"""

from __future__ import annotations

import dataclasses
import math
import os
import statistics
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, no_grad
from .experts import all_ones_lid, one_hot_lid
from .model import Model, count_parameters
from .seeding import derive_seed
from .training import TrainingDiverged, train
from .transducer import BLANK

__all__ = [
    "REPORT_COLUMNS",
    "CONDITIONS",
    "DEFAULT_CONDITIONS",
    "Condition",
    "EvalReport",
    "levenshtein",
    "token_error_rate",
    "greedy_decode",
    "gate_lid_accuracy",
    "evaluate_ter",
    "run_matrix",
    "summarize_report",
    "write_report_csv",
    "write_report_table",
]

REPORT_COLUMNS = "condition,seed,lang,ter,avg_ter,params,gate_acc"


def levenshtein(a, b):
    """Edit distance with unit substitution, insertion, and deletion costs."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        current = [i]
        for j, y in enumerate(b, start=1):
            current.append(
                min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (x != y))
            )
        previous = current
    return previous[-1]


def token_error_rate(hyp, ref):
    if len(ref) == 0:
        raise ContractError("token_error_rate needs a non-empty reference")
    return levenshtein(hyp, ref) / len(ref)


def greedy_decode(model, features, lid, max_symbols_per_frame=4):
    """Frame-synchronous greedy search.

    At each encoder frame take argmaxes over the joint output, emitting
    non-blank tokens (each advancing the prediction network) until blank
    or the per-frame cap, then move to the next frame.
    """
    if max_symbols_per_frame < 1:
        raise ContractError(f"emission cap must be positive, got {max_symbols_per_frame}")
    with no_grad():
        enc, _ = model.encode(features, lid)
        pred = model.prediction
        out, state = pred.step(pred.start_token, pred.initial_state())
        tokens = []
        for t in range(enc.shape[0]):
            emitted = 0
            while emitted < max_symbols_per_frame:
                logits = model.joint_step_logits(enc.values[t], out, lid)
                best = int(np.argmax(logits))
                if best == BLANK:
                    break
                tokens.append(best)
                out, state = pred.step(best, state)
                emitted += 1
    return tokens


def gate_lid_accuracy(model, utterances, mode="mean"):
    """Fraction of utterances whose summed gate logits pick the true language.

    With all-ones lid input, block logits are summed across blocks; "mean"
    averages frames before the argmax, "vote" takes a majority of per-frame
    argmaxes (ties go to the lower index).
    """
    if not model.has_gates:
        raise ContractError(f"variant {model.config.variant!r} has no gates")
    if mode not in ("mean", "vote"):
        raise ContractError(f"unknown gate accuracy mode {mode!r}")
    utterances = list(utterances)
    if not utterances:
        raise ContractError("gate_lid_accuracy needs at least one utterance")
    lid = all_ones_lid(model.config.n_languages)
    correct = 0
    with no_grad():
        for utt in utterances:
            _, block_logits = model.encode(utt.features, lid)
            summed = sum(logits.values for logits in block_logits)
            if mode == "mean":
                picked = int(np.argmax(summed.mean(axis=0)))
            else:
                votes = np.argmax(summed, axis=1)
                picked = int(np.bincount(votes, minlength=summed.shape[1]).argmax())
            correct += picked == utt.lid
    return correct / len(utterances)


def _eval_lid_vector(policy, true_language, n_languages):
    if policy == "onehot":
        return one_hot_lid(true_language, n_languages)
    if policy == "allones":
        return all_ones_lid(n_languages)
    raise ContractError(f"unknown eval lid policy {policy!r}")


def evaluate_ter(model, test_by_lang, eval_lid="allones", max_symbols_per_frame=4):
    """Per-language and overall token error rates on a test split.

    Returns (ter_by_lang, avg_ter, tokens_by_lang).
    """
    n = model.config.n_languages
    ter_by_lang = {}
    tokens_by_lang = {}
    total_edits = 0
    total_tokens = 0
    for lang in sorted(test_by_lang):
        edits = 0
        tokens = 0
        for utt in test_by_lang[lang]:
            lid = _eval_lid_vector(eval_lid, utt.lid, n)
            hyp = greedy_decode(model, utt.features, lid, max_symbols_per_frame)
            edits += levenshtein(hyp, utt.tokens)
            tokens += len(utt.tokens)
        if tokens == 0:
            raise ContractError(f"language {lang} test split has no reference tokens")
        ter_by_lang[lang] = edits / tokens
        tokens_by_lang[lang] = tokens
        total_edits += edits
        total_tokens += tokens
    return ter_by_lang, total_edits / total_tokens, tokens_by_lang


@dataclass(frozen=True)
class Condition:
    variant: str
    use_curriculum: bool
    eval_lid: str
    lid_weight: float = None  # None keeps the model config's weight
    use_joint_experts: bool = None  # None keeps the model config's setting


CONDITIONS = {
    "baseline": Condition("baseline", False, "allones"),
    "oracle-lid": Condition("oracle-lid", False, "onehot"),
    "separated": Condition("separated", False, "allones", use_joint_experts=False),
    "gated-expert": Condition("gated-expert", True, "allones"),
    "gated-expert-no-curriculum": Condition("gated-expert", False, "allones"),
    "gated-expert-no-lid-loss": Condition("gated-expert", True, "allones", lid_weight=0.0),
    "gated-expert-no-joint-experts": Condition(
        "gated-expert", True, "allones", use_joint_experts=False
    ),
}

DEFAULT_CONDITIONS = ("baseline", "oracle-lid", "gated-expert")


@dataclass
class EvalReport:
    conditions: list
    seeds: list
    config_hash: str = ""
    rows: list = dataclasses.field(default_factory=list)

    def rows_for(self, condition):
        return [r for r in self.rows if r["condition"] == condition]


def _condition_model_config(base_config, cond):
    changes = {"variant": cond.variant}
    if cond.use_joint_experts is not None:
        changes["use_joint_experts"] = cond.use_joint_experts
    return dataclasses.replace(base_config, **changes)


def run_matrix(
    base_config,
    corpus,
    conditions,
    seeds,
    train_template,
    out_dir=None,
    max_symbols_per_frame=4,
    gate_mode="mean",
    log=None,
):
    """Train and evaluate every (condition, seed) cell on the same dataset.

    A diverged run is recorded as a failed row and the matrix continues.
    Model init, batching, and curriculum randomness share one derived seed
    per seed entry, so conditions are compared on identical draws.
    """
    names = list(conditions)
    unknown = [n for n in names if n not in CONDITIONS]
    if unknown:
        raise ContractError(
            f"unknown conditions {unknown}; valid: {sorted(CONDITIONS)}"
        )
    if not seeds:
        raise ContractError("run_matrix needs at least one seed")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    report = EvalReport(names, list(seeds), train_template.config_hash)
    for name in names:
        cond = CONDITIONS[name]
        model_config = _condition_model_config(base_config, cond)
        for seed_entry in seeds:
            run_seed = derive_seed(train_template.seed, "matrix", str(seed_entry))
            row = {
                "condition": name,
                "seed": int(seed_entry),
                "failed": False,
                "error": "",
                "ter_by_lang": {},
                "tokens_by_lang": {},
                "avg_ter": math.nan,
                "params": 0,
                "gate_acc": None,
            }
            metrics_path = None
            if out_dir:
                metrics_path = os.path.join(
                    out_dir, f"metrics-{name}-seed{seed_entry}.csv"
                )
            model = Model(model_config, run_seed)
            row["params"] = count_parameters(model)
            run_config = dataclasses.replace(
                train_template,
                seed=run_seed,
                use_curriculum=cond.use_curriculum,
                lid_weight=cond.lid_weight
                if cond.lid_weight is not None
                else train_template.lid_weight,
                metrics_path=metrics_path,
                checkpoint_path=None,
            )
            if log:
                log(f"[{name} seed={seed_entry}] training {run_config.total_steps} steps")
            try:
                train(model, run_config, corpus["train"])
                ters, avg, token_counts = evaluate_ter(
                    model, corpus["test"], cond.eval_lid, max_symbols_per_frame
                )
                row["ter_by_lang"] = ters
                row["tokens_by_lang"] = token_counts
                row["avg_ter"] = avg
                if model.has_gates:
                    test_utts = [u for lang in sorted(corpus["test"])
                                 for u in corpus["test"][lang]]
                    row["gate_acc"] = gate_lid_accuracy(model, test_utts, gate_mode)
                if log:
                    log(f"[{name} seed={seed_entry}] avg_ter={avg:.4f}")
            except TrainingDiverged as exc:
                row["failed"] = True
                row["error"] = str(exc)
                if log:
                    log(f"[{name} seed={seed_entry}] FAILED: {exc}")
            report.rows.append(row)
    if out_dir:
        write_report_csv(report, os.path.join(out_dir, "report.csv"))
        write_report_table(report, os.path.join(out_dir, "report.txt"))
    return report


def summarize_report(report):
    """Median avg TER and gate accuracy per condition, failed rows excluded."""
    summary = {}
    for name in report.conditions:
        rows = [r for r in report.rows_for(name) if not r["failed"]]
        entry = {
            "runs": len(rows),
            "failed": len(report.rows_for(name)) - len(rows),
            "median_avg_ter": math.nan,
            "median_gate_acc": None,
            "params": rows[0]["params"] if rows else 0,
        }
        if rows:
            entry["median_avg_ter"] = statistics.median(r["avg_ter"] for r in rows)
            accs = [r["gate_acc"] for r in rows if r["gate_acc"] is not None]
            if accs:
                entry["median_gate_acc"] = statistics.median(accs)
        summary[name] = entry
    return summary


def _csv_cell(value):
    if value is None:
        return ""
    return repr(float(value))


def write_report_csv(report, path):
    lines = [f"# config={report.config_hash}", REPORT_COLUMNS]
    for row in report.rows:
        langs = sorted(row["ter_by_lang"]) or [-1]
        for lang in langs:
            ter = row["ter_by_lang"].get(lang, math.nan)
            lines.append(
                ",".join(
                    [
                        row["condition"],
                        str(row["seed"]),
                        str(lang),
                        _csv_cell(ter),
                        _csv_cell(row["avg_ter"]),
                        str(row["params"]),
                        _csv_cell(row["gate_acc"]),
                    ]
                )
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report_table(report, path):
    """Human-readable companion to the CSV."""
    lines = [f"# config={report.config_hash}"]
    header = f"{'condition':<32}{'seed':>6}{'avg_ter':>10}{'params':>9}{'gate_acc':>10}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in report.rows:
        if row["failed"]:
            avg = "failed"
            acc = ""
        else:
            avg = f"{row['avg_ter']:.4f}"
            acc = "" if row["gate_acc"] is None else f"{row['gate_acc']:.4f}"
        lines.append(
            f"{row['condition']:<32}{row['seed']:>6}{avg:>10}{row['params']:>9}{acc:>10}"
        )
    lines.append("")
    lines.append("medians over seeds")
    for name, entry in summarize_report(report).items():
        acc = entry["median_gate_acc"]
        acc_text = "" if acc is None else f"  gate_acc={acc:.4f}"
        lines.append(
            f"  {name:<30} avg_ter={entry['median_avg_ter']:.4f}"
            f"  params={entry['params']}{acc_text}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
