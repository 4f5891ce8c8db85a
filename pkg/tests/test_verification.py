from gated_transducer.verification import (
    GRAD_TOL,
    ORACLE_TOL,
    CheckResult,
    format_results,
    run_gradient_suite,
    run_oracle_suite,
)


def test_check_result_pass_fail_line():
    good = CheckResult("thing", 1e-9, 1e-5, 0.01)
    bad = CheckResult("other", 2e-5, 1e-5, 0.01)
    assert good.passed and not bad.passed
    text = format_results([good, bad])
    lines = text.splitlines()
    assert lines[0].startswith("PASS") and "thing" in lines[0]
    assert lines[1].startswith("FAIL") and "other" in lines[1]


def test_oracle_suite_small_case_budget():
    results = run_oracle_suite(seed=1, cases=15)
    names = [r.name for r in results]
    assert "worked-lattice" in names
    assert "enumeration-vs-dp" in names
    assert all(r.passed for r in results), format_results(results)
    dp = next(r for r in results if r.name == "enumeration-vs-dp")
    assert dp.tolerance <= ORACLE_TOL


def test_gradient_suite_covers_primitives_and_composites():
    results = run_gradient_suite(seed=0)
    names = {r.name for r in results}
    for needed in (
        "matmul-left", "softmax", "layer-norm", "embedding",
        "transformer-layer-params", "gated-block", "joint-experts",
        "transducer-loss", "full-model",
    ):
        assert needed in names, needed
    assert all(r.tolerance <= GRAD_TOL for r in results)
    assert all(r.passed for r in results), format_results(results)
