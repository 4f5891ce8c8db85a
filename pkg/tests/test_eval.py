import numpy as np
import pytest

from gated_transducer.autodiff import ContractError
from gated_transducer.data import Utterance
from gated_transducer.evaluate import (
    CONDITIONS,
    DEFAULT_CONDITIONS,
    EvalReport,
    gate_lid_accuracy,
    greedy_decode,
    levenshtein,
    summarize_report,
    token_error_rate,
    write_report_csv,
    write_report_table,
)
from gated_transducer.experts import all_ones_lid
from gated_transducer.model import ModelConfig, build_model


def test_levenshtein_known_values():
    assert levenshtein([], []) == 0
    assert levenshtein([1, 2, 3], [1, 2, 3]) == 0
    assert levenshtein([1, 2, 3], [1, 3]) == 1  # deletion
    assert levenshtein([1, 3], [1, 2, 3]) == 1  # insertion
    assert levenshtein([1, 2], [1, 9]) == 1  # substitution
    assert levenshtein([5, 6, 7], []) == 3
    assert levenshtein("kitten", "sitting") == 3


def test_token_error_rate_normalizes_by_reference():
    assert token_error_rate([1, 2], [1, 2, 3, 4]) == pytest.approx(0.5)
    # errors can exceed 1.0 when the hypothesis is much longer
    assert token_error_rate([1] * 10, [2]) == 10.0
    with pytest.raises(ContractError):
        token_error_rate([1], [])


def tiny_model(variant="gated-expert", seed=0):
    cfg = ModelConfig(
        n_languages=2, feature_dim=3, vocab_size=7, model_dim=8, heads=2,
        ffn_dim=12, chunk_size=2, left_chunks=2, downsample_factor=2,
        shared_bottom_depth=1, n_blocks=1, expert_depth=1, shared_depth=0,
        prediction_dim=6, joint_dim=6, variant=variant,
    )
    model = build_model(cfg, seed)
    rng = np.random.default_rng(seed + 40)
    for _, p in model._params:
        p.values = rng.normal(0, 0.25, size=p.values.shape)
    return model


def test_greedy_decode_returns_token_list():
    model = tiny_model()
    feats = np.random.default_rng(0).normal(size=(8, 3))
    tokens = greedy_decode(model, feats, all_ones_lid(2))
    assert isinstance(tokens, list)
    assert all(0 < t < 7 for t in tokens)
    # 4 encoder frames, cap 2: at most 8 emissions
    capped = greedy_decode(model, feats, all_ones_lid(2), max_symbols_per_frame=2)
    assert len(capped) <= 8


def test_greedy_decode_leaves_no_grads():
    model = tiny_model()
    feats = np.random.default_rng(1).normal(size=(6, 3))
    greedy_decode(model, feats, all_ones_lid(2))
    assert all(p.grad is None for _, p in model._params)


def test_greedy_decode_rejects_bad_cap():
    model = tiny_model()
    with pytest.raises(ContractError):
        greedy_decode(model, np.zeros((4, 3)), all_ones_lid(2), max_symbols_per_frame=0)


def test_gate_accuracy_modes_and_contracts():
    model = tiny_model()
    rng = np.random.default_rng(2)
    utts = [
        Utterance(features=rng.normal(size=(6, 3)), tokens=[1], lid=lang)
        for lang in (0, 1) for _ in range(3)
    ]
    for mode in ("mean", "vote"):
        acc = gate_lid_accuracy(model, utts, mode=mode)
        assert 0.0 <= acc <= 1.0
    with pytest.raises(ContractError):
        gate_lid_accuracy(model, utts, mode="best")
    with pytest.raises(ContractError):
        gate_lid_accuracy(model, [])
    with pytest.raises(ContractError):
        gate_lid_accuracy(tiny_model(variant="baseline"), utts)


def test_condition_table_covers_required_set():
    assert set(DEFAULT_CONDITIONS) == {"baseline", "oracle-lid", "gated-expert"}
    assert set(CONDITIONS) == {
        "baseline", "oracle-lid", "separated", "gated-expert",
        "gated-expert-no-curriculum", "gated-expert-no-lid-loss",
        "gated-expert-no-joint-experts",
    }
    assert CONDITIONS["gated-expert-no-lid-loss"].lid_weight == 0.0
    assert CONDITIONS["gated-expert-no-curriculum"].use_curriculum is False
    assert CONDITIONS["oracle-lid"].eval_lid == "onehot"


def sample_report():
    rows = []
    for cond, ters in (("baseline", [0.5, 0.3]), ("gated-expert", [0.2, 0.4])):
        for seed, ter in enumerate(ters):
            rows.append({
                "condition": cond, "seed": seed,
                "ter_by_lang": {0: ter, 1: ter + 0.01},
                "avg_ter": ter, "params": 1000,
                "gate_acc": 0.9 if "gated" in cond else None,
                "failed": False,
            })
    return EvalReport(
        conditions=["baseline", "gated-expert"], seeds=[0, 1],
        config_hash="cafe", rows=rows,
    )


def test_summarize_report_takes_medians():
    summary = summarize_report(sample_report())
    assert summary["baseline"]["median_avg_ter"] == pytest.approx(0.4)
    assert summary["gated-expert"]["median_avg_ter"] == pytest.approx(0.3)


def test_report_csv_format(tmp_path):
    report = sample_report()
    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# config=cafe"
    assert lines[1] == "condition,seed,lang,ter,avg_ter,params,gate_acc"
    # one line per (condition, seed, language)
    assert len(lines) == 2 + 2 * len(report.rows)
    # empty trailing cell for conditions without gates
    assert lines[2].endswith(",")
    assert lines[2].split(",")[:3] == ["baseline", "0", "0"]
    table = tmp_path / "report.txt"
    write_report_table(report, table)
    text = table.read_text()
    assert "baseline" in text and "gated-expert" in text
    assert "median" in text
