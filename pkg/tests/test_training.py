import numpy as np
import pytest

from gated_transducer.autodiff import ContractError, Tensor
from gated_transducer.data import Utterance
from gated_transducer.model import ModelConfig, build_model
from gated_transducer.seeding import substream
from gated_transducer.training import (
    Adam,
    CurriculumSchedule,
    TrainRunConfig,
    clip_gradients,
    curriculum_p,
    sample_lid_vector,
    sample_minibatch,
    train,
    warmup_lr,
)


def test_schedule_bounds_and_p_shape():
    sched = CurriculumSchedule(1000)
    b1, b2 = sched.stage_bounds()
    assert (b1, b2) == (250, 750)
    assert curriculum_p(0, sched) == 1.0
    assert curriculum_p(249, sched) == 1.0
    assert curriculum_p(750, sched) == 0.0
    assert curriculum_p(999, sched) == 0.0
    # linear in between, non-increasing overall
    assert curriculum_p(500, sched) == pytest.approx(0.5)
    ps = [curriculum_p(s, sched) for s in range(1000)]
    assert all(a >= b for a, b in zip(ps, ps[1:]))


def test_schedule_fraction_validation():
    with pytest.raises(ContractError):
        CurriculumSchedule(100, 0.5, 0.5, 0.5)
    with pytest.raises(ContractError):
        CurriculumSchedule(0)
    with pytest.raises(ContractError):
        curriculum_p(100, CurriculumSchedule(100))


def test_sample_lid_vector_extremes():
    rng = substream(0, "lid")
    for _ in range(20):
        assert sample_lid_vector(1.0, 1, 3, rng).sum() == 1
        assert sample_lid_vector(0.0, 1, 3, rng).sum() == 3


def test_sample_lid_vector_rate():
    rng = substream(1, "lid")
    draws = [sample_lid_vector(0.3, 0, 2, rng).sum() == 1 for _ in range(4000)]
    assert abs(np.mean(draws) - 0.3) < 0.03


def test_warmup_lr_peaks_at_warmup_boundary():
    lrs = [warmup_lr(s, 64, 100) for s in range(1, 400)]
    peak = int(np.argmax(lrs)) + 1
    assert peak == 100
    # decays as 1/sqrt(step) afterwards
    assert lrs[299] == pytest.approx(64 ** -0.5 * 300 ** -0.5)
    with pytest.raises(ContractError):
        warmup_lr(0, 64, 100)


def test_minibatch_respects_language_weights():
    corpus = {0: ["a"] * 3, 1: ["b"] * 3}
    rng = substream(2, "batch")
    batch = sample_minibatch(corpus, [1.0, 0.0], 32, rng)
    assert set(batch) == {"a"}
    counts = sample_minibatch(corpus, [0.5, 0.5], 2000, substream(3, "batch"))
    frac = counts.count("a") / len(counts)
    assert abs(frac - 0.5) < 0.05


def test_minibatch_input_validation():
    with pytest.raises(ContractError):
        sample_minibatch({}, [], 4, substream(0, "b"))
    with pytest.raises(ContractError):
        sample_minibatch({0: ["x"]}, [0.0], 4, substream(0, "b"))
    with pytest.raises(ContractError):
        sample_minibatch({0: []}, [1.0], 4, substream(0, "b"))


def test_adam_matches_reference_single_step():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.5])
    opt = Adam({"p": p}, beta1=0.9, beta2=0.98, eps=1e-9)
    opt.step(lr=0.1)
    # first step: m_hat = grad, v_hat = grad^2, update = grad/(|grad|+eps)
    expected = np.array([1.0, 2.0]) - 0.1 * np.array([1.0, -1.0]) / (0.5 + 1e-9) * 0.5
    np.testing.assert_allclose(p.values, expected, atol=1e-9)


def test_adam_skips_parameters_without_grads():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([2.0]), requires_grad=True)
    a.grad = np.array([1.0])
    opt = Adam({"a": a, "b": b})
    opt.step(lr=0.1)
    assert b.values[0] == 2.0
    assert a.values[0] != 1.0


def test_clip_gradients_scales_to_max_norm():
    a = Tensor(np.array([3.0]), requires_grad=True)
    b = Tensor(np.array([4.0]), requires_grad=True)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    norm = clip_gradients({"a": a, "b": b}, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    clipped = np.sqrt(a.grad[0] ** 2 + b.grad[0] ** 2)
    assert clipped == pytest.approx(1.0)
    # below the threshold nothing changes
    a.grad = np.array([0.3])
    b.grad = np.array([0.4])
    norm = clip_gradients({"a": a, "b": b}, max_norm=1.0)
    assert norm == pytest.approx(0.5)
    assert a.grad[0] == 0.3


def tiny_corpus(n_languages=2, per_lang=6, seed=0):
    rng = np.random.default_rng(seed)
    by_lang = {}
    for lang in range(n_languages):
        utts = []
        for _ in range(per_lang):
            n_tokens = int(rng.integers(1, 3))
            tokens = [int(rng.integers(1, 7)) for _ in range(n_tokens)]
            utts.append(
                Utterance(
                    features=rng.normal(size=(4 * n_tokens, 3)), tokens=tokens, lid=lang
                )
            )
        by_lang[lang] = utts
    return by_lang


def tiny_model(variant="gated-expert", seed=0):
    cfg = ModelConfig(
        n_languages=2, feature_dim=3, vocab_size=7, model_dim=8, heads=2,
        ffn_dim=12, chunk_size=2, left_chunks=2, downsample_factor=2,
        shared_bottom_depth=1, n_blocks=1, expert_depth=1, shared_depth=0,
        prediction_dim=6, joint_dim=6, lid_weight=0.2, variant=variant,
    )
    return build_model(cfg, seed)


def test_train_writes_metrics_and_updates_params(tmp_path):
    model = tiny_model()
    before = {n: p.values.copy() for n, p in model._params}
    metrics_path = tmp_path / "metrics.csv"
    cfg = TrainRunConfig(
        total_steps=6, batch_size=2, seed=0, warmup_steps=2,
        metrics_path=str(metrics_path), log_wall_time=False, config_hash="feed",
    )
    result = train(model, cfg, tiny_corpus())
    assert result.final_step == 6
    assert len(result.metrics) == 6
    moved = sum(np.any(before[n] != p.values) for n, p in model._params)
    assert moved > 0
    lines = metrics_path.read_text().strip().splitlines()
    assert lines[0] == "# config=feed"
    assert lines[1] == "step,lr,p,loss_total,loss_rnnt,loss_lid,grad_norm,wall_ms"
    assert len(lines) == 2 + 6
    assert all(line.endswith(",0") for line in lines[2:])  # wall_ms suppressed


def test_train_is_reproducible():
    results = []
    for _ in range(2):
        model = tiny_model()
        cfg = TrainRunConfig(total_steps=5, batch_size=2, seed=3, warmup_steps=2)
        results.append(train(model, cfg, tiny_corpus()))
    a, b = results
    for ra, rb in zip(a.metrics, b.metrics):
        assert ra["loss_total"] == rb["loss_total"]
        assert ra["grad_norm"] == rb["grad_norm"]


def test_curriculum_stages_control_lid_kinds():
    model = tiny_model()
    cfg = TrainRunConfig(total_steps=8, batch_size=2, seed=1, warmup_steps=2,
                         stage1_frac=0.25, stage2_frac=0.5, stage3_frac=0.25)
    result = train(model, cfg, tiny_corpus())
    by_step = {}
    for step, lang, kind in result.lid_events:
        by_step.setdefault(step, set()).add(kind)
    assert by_step[0] == {"onehot"}
    assert by_step[1] == {"onehot"}
    assert by_step[6] == {"allones"}
    assert by_step[7] == {"allones"}


def test_oracle_variant_always_one_hot():
    model = tiny_model(variant="oracle-lid")
    cfg = TrainRunConfig(total_steps=4, batch_size=2, seed=2, warmup_steps=2)
    result = train(model, cfg, tiny_corpus())
    kinds = {kind for _, _, kind in result.lid_events}
    assert kinds == {"onehot"}


def test_baseline_always_all_ones():
    model = tiny_model(variant="baseline")
    cfg = TrainRunConfig(total_steps=4, batch_size=2, seed=2, warmup_steps=2)
    result = train(model, cfg, tiny_corpus())
    kinds = {kind for _, _, kind in result.lid_events}
    assert kinds == {"allones"}


def test_checkpoint_written_at_end(tmp_path):
    model = tiny_model()
    path = tmp_path / "model.bin"
    cfg = TrainRunConfig(total_steps=3, batch_size=2, seed=0, warmup_steps=2,
                         checkpoint_path=str(path))
    result = train(model, cfg, tiny_corpus())
    assert result.checkpoint_path == str(path)
    from gated_transducer.model import load_checkpoint

    loaded, step, _ = load_checkpoint(path)
    assert step == 3
    for (na, pa), (nb, pb) in zip(model._params, loaded._params):
        np.testing.assert_array_equal(pa.values, pb.values)
