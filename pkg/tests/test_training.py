import logging
import math
import statistics

import numpy as np
import pytest

from kbnli.data import Example, Vocabulary, gen_world
from kbnli.knowledge import RelationKind, RelationStore
from kbnli.models import ModelConfig, forward, init_params
from kbnli.tensor import Tensor
from kbnli.training import (
    SCENARIOS,
    AblationRow,
    Metrics,
    OptimizerState,
    ablate_layers,
    ablation_report_rows,
    adam_step,
    clip_gradients,
    evaluate,
    evaluate_rule_baseline,
    format_layer_set,
    lr_at_step,
    make_experiment_data,
    metrics_from_predictions,
    scenario_grid,
    scenario_report_rows,
    train,
    write_report,
)

# -- learning-rate schedule --------------------------------------------------


def test_lr_endpoints():
    state = OptimizerState(total_steps=100, peak_lr=1e-4)
    assert lr_at_step(state, 0) == 0.0
    assert lr_at_step(state, 10) == 1e-4
    assert lr_at_step(state, 100) == 0.0


def test_lr_clamped_beyond_total():
    state = OptimizerState(total_steps=100)
    assert lr_at_step(state, 150) == 0.0
    assert lr_at_step(state, 101) == 0.0


def test_lr_negative_step_rejected():
    state = OptimizerState(total_steps=100)
    with pytest.raises(ValueError):
        lr_at_step(state, -1)


def test_lr_midpoints_are_linear():
    state = OptimizerState(total_steps=100, peak_lr=2e-4)
    assert lr_at_step(state, 5) == pytest.approx(1e-4, rel=1e-12)
    # decay midpoint: (100 - 55) / 90 of the peak
    assert lr_at_step(state, 55) == pytest.approx(1e-4, rel=1e-12)


def test_lr_continuity_property():
    rng = np.random.default_rng(11)
    for _ in range(50):
        total = int(rng.integers(10, 500))
        warmup = float(rng.uniform(0.05, 0.5))
        peak = float(rng.uniform(1e-5, 1e-2))
        state = OptimizerState(total_steps=total, peak_lr=peak, warmup=warmup)
        bound = peak / min(warmup * total, (1 - warmup) * total) + 1e-15
        values = [lr_at_step(state, s) for s in range(total + 1)]
        for a, b in zip(values, values[1:]):
            assert abs(b - a) <= bound
        assert max(values) <= peak + 1e-15


# -- adam ---------------------------------------------------------------------


def _scalar_param(value, grad):
    t = Tensor(np.array([value], dtype=np.float64))
    t.grad = None if grad is None else np.array([grad], dtype=np.float64)
    return t


def test_adam_first_step_worked_example():
    lam = 0.73
    t = _scalar_param(0.0, 1.0)
    state = OptimizerState(total_steps=10)
    adam_step([("p", t)], state, lr=lam)
    expected = -lam * 0.1 / (math.sqrt(0.001) + 1e-6)
    assert abs(float(t.data[0]) - expected) < 1e-6


def test_adam_accumulates_without_bias_correction():
    t = _scalar_param(0.0, 1.0)
    state = OptimizerState(total_steps=10)
    adam_step([("p", t)], state, lr=0.0)
    t.grad = np.array([1.0])
    adam_step([("p", t)], state, lr=0.0)
    assert state.m["p"][0] == pytest.approx(0.19, rel=1e-12)
    assert state.v["p"][0] == pytest.approx(0.001999, rel=1e-12)
    assert state.step == 2


def test_adam_missing_grad_is_skipped(caplog):
    with_grad = _scalar_param(1.0, 1.0)
    without = _scalar_param(5.0, None)
    state = OptimizerState(total_steps=10)
    with caplog.at_level(logging.WARNING, logger="kbnli.training"):
        adam_step([("a", with_grad), ("b", without)], state, lr=0.1)
    assert float(without.data[0]) == 5.0
    assert state.skipped == 1
    assert "no gradient" in caplog.text
    assert float(with_grad.data[0]) != 1.0


def test_adam_zero_grad_leaves_param_unchanged():
    t = _scalar_param(3.0, 0.0)
    state = OptimizerState(total_steps=10)
    adam_step([("p", t)], state, lr=0.1)
    assert float(t.data[0]) == 3.0


def test_adam_default_lr_follows_schedule():
    t = _scalar_param(0.0, 1.0)
    state = OptimizerState(total_steps=10, peak_lr=1e-3)
    adam_step([("p", t)], state)
    lr1 = lr_at_step(state, 1)
    expected = -lr1 * 0.1 / (math.sqrt(0.001) + 1e-6)
    assert float(t.data[0]) == pytest.approx(expected, rel=1e-12)


def test_adam_weight_decay_is_decoupled():
    t = _scalar_param(2.0, 1.0)
    state = OptimizerState(total_steps=10, weight_decay=0.1)
    adam_step([("p", t)], state, lr=1.0)
    expected = 2.0 - (0.1 / (math.sqrt(0.001) + 1e-6) + 0.1 * 2.0)
    assert float(t.data[0]) == pytest.approx(expected, rel=1e-12)


# -- gradient clipping -------------------------------------------------------


def test_clip_scales_to_unit_norm():
    a = _scalar_param(0.0, 3.0)
    b = _scalar_param(0.0, 4.0)
    norm = clip_gradients([("a", a), ("b", b)], 1.0)
    assert norm == pytest.approx(5.0, rel=1e-12)
    assert a.grad[0] == pytest.approx(0.6, rel=1e-12)
    assert b.grad[0] == pytest.approx(0.8, rel=1e-12)


def test_clip_noop_below_threshold():
    a = _scalar_param(0.0, 0.3)
    norm = clip_gradients([("a", a)], 1.0)
    assert norm == pytest.approx(0.3, rel=1e-12)
    assert a.grad[0] == 0.3


def test_clip_ignores_missing_grads():
    a = _scalar_param(0.0, 2.0)
    b = _scalar_param(0.0, None)
    norm = clip_gradients([("a", a), ("b", b)], 1.0)
    assert norm == pytest.approx(2.0, rel=1e-12)
    assert b.grad is None


# -- metrics ------------------------------------------------------------------


def test_metrics_against_brute_force_oracle():
    rng = np.random.default_rng(5)
    gold = [int(g) for g in rng.integers(0, 3, size=1000)]
    pred = [int(p) for p in rng.integers(0, 3, size=1000)]
    m = metrics_from_predictions(gold, pred)
    hits = sum(1 for g, p in zip(gold, pred) if g == p)
    assert m.accuracy == hits / 1000
    for c in range(3):
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        predicted = sum(1 for p in pred if p == c)
        actual = sum(1 for g in gold if g == c)
        assert m.confusion[c, c] == tp
        assert m.precision[c] == (tp / predicted if predicted else 0.0)
        assert m.recall[c] == (tp / actual if actual else 0.0)


def test_metrics_constant_contradiction_split():
    gold = [0] * 982 + [1] * 47 + [2] * 7164
    pred = [2] * len(gold)
    m = metrics_from_predictions(gold, pred)
    assert m.count == 8193
    assert m.accuracy == 7164 / 8193
    assert m.precision[2] == 7164 / 8193
    assert m.recall[2] == 1.0
    assert m.precision[0] == 0.0 and m.recall[0] == 0.0


def test_metrics_empty_inputs_and_shape():
    m = Metrics(np.zeros((3, 3)))
    assert m.accuracy == 0.0
    assert m.precision == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        Metrics(np.zeros((2, 2)))


def test_metrics_confusion_is_integer_counts():
    m = metrics_from_predictions([0, 0, 1, 2], [0, 1, 1, 0])
    assert m.confusion.dtype == np.int64
    assert m.confusion[0, 0] == 1 and m.confusion[0, 1] == 1
    assert m.confusion[1, 1] == 1 and m.confusion[2, 0] == 1
    assert m.count == 4


def test_metrics_length_mismatch_rejected():
    with pytest.raises(ValueError):
        metrics_from_predictions([0, 1], [0])


# -- rule-baseline evaluation -------------------------------------------------


def _tiny_store():
    store = RelationStore()
    store.add(RelationKind.SYNONYM, "cat", "feline")
    store.add(RelationKind.ANTONYM, "hot", "cold")
    return store


def test_rule_baseline_uses_provenance_or_diff():
    store = _tiny_store()
    with_prov = Example(["the", "cat", "ran"], ["the", "feline", "ran"],
                        "entailment", provenance=(1, RelationKind.SYNONYM))
    without = Example(["the", "cat", "ran"], ["the", "feline", "ran"],
                      "entailment")
    for ex in (with_prov, without):
        m = evaluate_rule_baseline(store, [ex])
        assert m.accuracy == 1.0


def test_rule_baseline_abstains_to_configurable_label():
    store = _tiny_store()
    unknown = Example(["a", "dog", "b"], ["a", "wolf", "b"], "neutral")
    assert evaluate_rule_baseline(store, [unknown]).accuracy == 1.0
    m = evaluate_rule_baseline(store, [unknown],
                               abstain_label="contradiction")
    assert m.accuracy == 0.0
    assert m.confusion[1, 2] == 1


def test_rule_baseline_handles_unalignable_sentences():
    store = _tiny_store()
    odd = Example(["hot", "day"], ["cold"], "contradiction")
    m = evaluate_rule_baseline(store, [odd])
    # no unique substitution position: falls back to the abstain label
    assert m.confusion[2, 1] == 1


# -- train / evaluate ---------------------------------------------------------

# label = number of "a" tokens: 2 -> entailment, 1 -> neutral, 0 ->
# contradiction, so the task is linearly separable on the word identities
TOY_LABEL = {("a", "a"): "entailment", ("a", "b"): "neutral",
             ("b", "a"): "neutral", ("b", "b"): "contradiction"}


def _toy_task():
    vocab = Vocabulary(["a", "b"])
    examples = []
    for first in "ab":
        for second in "ab":
            for _ in range(16):
                examples.append(Example([first], [second],
                                        TOY_LABEL[first, second]))
    config = ModelConfig(architecture="model1", n_layers=1, n_cross=1,
                         heads=2, d_model=10, d_ff=16, vocab_size=len(vocab),
                         max_positions=4)
    return vocab, examples, config


def test_toy_task_loss_converges():
    vocab, examples, config = _toy_task()
    params = init_params(config, seed=1)
    _, history = train(params, config, examples, vocab, epochs=5,
                       batch_size=8, seed=1, peak_lr=0.01)
    assert history["epoch_loss"][-1] < 0.05


def test_toy_task_median_epoch_loss_decreases():
    vocab, examples, config = _toy_task()
    first, last = [], []
    for seed in (1, 2, 3):
        params = init_params(config, seed=seed)
        _, history = train(params, config, examples, vocab, epochs=5,
                           batch_size=8, seed=seed, peak_lr=0.01)
        first.append(history["epoch_loss"][0])
        last.append(history["epoch_loss"][-1])
    assert statistics.median(last) <= statistics.median(first)


def test_train_is_deterministic():
    vocab, examples, config = _toy_task()
    runs = []
    for _ in range(2):
        params = init_params(config, seed=3)
        _, history = train(params, config, examples, vocab, epochs=2,
                           batch_size=8, seed=3, peak_lr=0.01)
        runs.append((history, {n: t.data.copy() for n, t in params.named()}))
    assert runs[0][0] == runs[1][0]
    for name, data in runs[0][1].items():
        np.testing.assert_array_equal(data, runs[1][1][name])


def test_train_with_empty_store_matches_no_knowledge():
    # five heads so the default relation-to-head assignment is hostable
    vocab, examples, _ = _toy_task()
    kwargs = dict(architecture="model1", n_layers=1, n_cross=1, heads=5,
                  d_model=10, d_ff=16, vocab_size=len(vocab), max_positions=4)
    plain_config = ModelConfig(**kwargs)
    biased_config = ModelConfig(**kwargs, modified_layers=frozenset({1}))
    final = []
    for cfg, store in ((biased_config, RelationStore()), (plain_config, None)):
        params = init_params(cfg, seed=2)
        train(params, cfg, examples, vocab, store=store, use_knowledge=True,
              epochs=2, batch_size=8, seed=2, peak_lr=0.01)
        final.append({n: t.data.copy() for n, t in params.named()})
    for name, data in final[0].items():
        np.testing.assert_array_equal(data, final[1][name])


def test_train_counts_no_skipped_params():
    vocab, examples, config = _toy_task()
    params = init_params(config, seed=1)
    state, _ = train(params, config, examples, vocab, epochs=1,
                     batch_size=8, seed=1, peak_lr=0.01)
    assert state.skipped == 0
    assert state.step == state.total_steps == 8


def test_train_aborts_on_non_finite_loss():
    vocab, examples, config = _toy_task()
    params = init_params(config, seed=1)
    # position 0 is read by every sequence, so the first batch is poisoned
    params.pos_emb.data[0, 0] = np.nan
    with pytest.raises(RuntimeError, match=r"step 1 \(epoch 1, batch 0\)"):
        train(params, config, examples, vocab, epochs=1, batch_size=8,
              seed=1)


def test_evaluate_does_not_mutate_params():
    vocab, examples, config = _toy_task()
    params = init_params(config, seed=4)
    before = {n: t.data.copy() for n, t in params.named()}
    evaluate(params, config, examples, vocab, batch_size=8)
    for name, tensor in params.named():
        np.testing.assert_array_equal(tensor.data, before[name])


def test_evaluate_knowledge_flag_inert_without_modified_layers():
    vocab, examples, config = _toy_task()
    store = RelationStore()
    store.add(RelationKind.ANTONYM, "a", "b")
    params = init_params(config, seed=4)
    on = evaluate(params, config, examples, vocab, store=store,
                  use_knowledge=True, batch_size=8)
    off = evaluate(params, config, examples, vocab, store=store,
                   use_knowledge=False, batch_size=8)
    np.testing.assert_array_equal(on.confusion, off.confusion)


def test_evaluate_matches_training_data_after_convergence():
    vocab, examples, config = _toy_task()
    params = init_params(config, seed=1)
    train(params, config, examples, vocab, epochs=5, batch_size=8, seed=1,
          peak_lr=0.01)
    m = evaluate(params, config, examples, vocab, batch_size=8)
    assert m.accuracy == 1.0


# -- harness -------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_world():
    return gen_world(seed=9, n_words=30, pairs_per_relation=4, n_fillers=8)


@pytest.fixture(scope="module")
def small_data(small_world):
    data = make_experiment_data(small_world, data_seed=5, n_train=48,
                                n_test=24, template_len=5)
    assert len(data.train) == 48
    assert len(data.adversarial) == 24
    assert len(data.clean) == 24
    return data


def _small_config(vocab):
    return ModelConfig(architecture="model1", n_layers=1, n_cross=1, heads=5,
                       d_model=10, d_ff=16, vocab_size=len(vocab),
                       max_positions=16, modified_layers=frozenset({1}))


def test_scenario_grid_names_and_ranges(small_world, small_data):
    config = _small_config(small_data.vocab)
    results = scenario_grid(config, small_world, small_data, seeds=(1,),
                            epochs=1, batch_size=16, peak_lr=0.01)
    assert tuple(r.scenario for r in results) == SCENARIOS
    for r in results:
        assert 0.0 <= r.clean_accuracy <= 1.0
        assert 0.0 <= r.adversarial_accuracy <= 1.0
        assert len(r.adv_precision) == 3 and len(r.adv_recall) == 3


def test_ablate_layers_baseline_first_and_increase(small_world, small_data):
    config = _small_config(small_data.vocab)
    rows = ablate_layers(config, small_world, small_data,
                         layer_sets=[{1}], seed=1, epochs=1, batch_size=16,
                         peak_lr=0.01)
    assert rows[0].layer_set == frozenset()
    assert rows[0].increase == 0.0
    assert rows[1].layer_set == frozenset({1})
    expected = rows[1].adversarial.accuracy - rows[0].adversarial.accuracy
    assert rows[1].increase == expected


def test_format_layer_set():
    assert format_layer_set(frozenset()) == "{}"
    assert format_layer_set({2, 1}) == "{1,2}"


def test_write_report_layout(tmp_path):
    rows = [AblationRow(frozenset({1}), metrics_from_predictions([0], [0]),
                        metrics_from_predictions([1, 2], [1, 0]), 0.25)]
    path = tmp_path / "metrics.tsv"
    write_report(path, {"run-id": "r1", "seed": 7},
                 ablation_report_rows(rows, "r1"))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "run-id=r1"
    assert lines[1] == "seed=7"
    header = lines[2].split("\t")
    assert header == ["run-id", "scenario/layer-set", "clean-accuracy",
                      "adversarial-accuracy", "P_e", "P_n", "P_c",
                      "R_e", "R_n", "R_c"]
    body = lines[3].split("\t")
    assert body[0] == "r1" and body[1] == "{1}"
    assert body[2] == "1.0000" and body[3] == "0.5000"
    assert len(body) == 10


def test_scenario_report_rows_carry_medians():
    from kbnli.training import ScenarioResult

    results = [ScenarioResult("train+infer+", 0.9, 0.8,
                              (0.1, 0.2, 0.3), (0.4, 0.5, 0.6))]
    rows = scenario_report_rows(results, "run")
    assert rows == [("run", "train+infer+", 0.9, 0.8,
                     (0.1, 0.2, 0.3), (0.4, 0.5, 0.6))]
