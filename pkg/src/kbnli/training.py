"""Optimizer, training loop, metrics, and the experiment harness.

The optimizer is the BERT flavor of Adam: no bias-correction terms, epsilon
1e-6, linear warmup over the first 10% of steps and linear decay to zero.
The harness reproduces two effects at desk scale: the robustness gap on
held-out relation pairs (layer ablations) and the four train/inference
knowledge-switch scenarios.
"""

import logging
import math
import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Vocabulary, encode_batch, gen_examples
from .knowledge import ABSTAIN, LABEL_TO_ID, wordnet_rule_predict
from .models import forward, init_params
from .tensor import cross_entropy

logger = logging.getLogger(__name__)

SCENARIOS = ("train+infer+", "train+infer-", "train-infer-", "train-infer+")


@dataclass
class OptimizerState:
    """Adam accumulators plus the linear warmup/decay schedule."""

    total_steps: int
    peak_lr: float = 1e-4
    warmup: float = 0.10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-6
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def lr_at_step(state, step):
    """Linear ramp 0 -> peak over the warmup span, then linear decay to 0."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    total = state.total_steps
    if step > total:
        return 0.0
    warmup_steps = state.warmup * total
    if warmup_steps > 0 and step <= warmup_steps:
        return state.peak_lr * step / warmup_steps
    if total == warmup_steps:
        return state.peak_lr
    return state.peak_lr * (total - step) / (total - warmup_steps)


def adam_step(named_params, state, lr=None):
    """One update over (name, tensor) pairs; advances the step counter.

    m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2 ;
    p <- p - lr (m / (sqrt(v) + eps) + wd p), with no bias correction.
    Parameters without a gradient are skipped and counted.
    """
    state.step += 1
    if lr is None:
        lr = lr_at_step(state, state.step)
    for name, tensor in named_params:
        g = tensor.grad
        if g is None:
            state.skipped += 1
            logger.warning("no gradient for %s at step %d; skipped", name, state.step)
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = m / (np.sqrt(v) + state.epsilon)
        if state.weight_decay:
            update = update + state.weight_decay * tensor.data
        tensor.data = tensor.data - lr * update


def clip_gradients(named_params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for _, tensor in named_params:
        if tensor.grad is not None:
            total += float((tensor.grad * tensor.grad).sum())
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for _, tensor in named_params:
            if tensor.grad is not None:
                tensor.grad = tensor.grad * scale
    return norm


# -- metrics ---------------------------------------------------------------


@dataclass
class Metrics:
    """3x3 integer confusion matrix, rows = gold, columns = predicted."""

    confusion: np.ndarray

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        if self.confusion.shape != (3, 3):
            raise ValueError(f"confusion must be 3x3, got {self.confusion.shape}")

    @property
    def count(self):
        return int(self.confusion.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.confusion)) / self.count if self.count else 0.0

    @property
    def precision(self):
        cols = self.confusion.sum(axis=0)
        return tuple(
            float(self.confusion[c, c]) / cols[c] if cols[c] else 0.0
            for c in range(3)
        )

    @property
    def recall(self):
        rows = self.confusion.sum(axis=1)
        return tuple(
            float(self.confusion[c, c]) / rows[c] if rows[c] else 0.0
            for c in range(3)
        )


def metrics_from_predictions(gold_ids, predicted_ids):
    confusion = np.zeros((3, 3), dtype=np.int64)
    for g, p in zip(gold_ids, predicted_ids, strict=True):
        confusion[g, p] += 1
    return Metrics(confusion)


# -- training and evaluation --------------------------------------------------


def _batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def train(params, config, examples, vocab, store=None, use_knowledge=True,
          epochs=5, batch_size=32, seed=0, peak_lr=1e-4, warmup=0.1,
          clip_norm=1.0, weight_decay=0.0, max_len=None):
    """Train in place; returns (OptimizerState, history).

    history maps "step_loss" to the per-step losses and "epoch_loss" to
    per-epoch means. Knowledge enters through bias stacks built per batch
    from the store, only when use_knowledge is set and the config has
    modified layers. A NaN loss aborts with the step and batch identified.
    """
    named = list(params.named())
    n = len(examples)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    state = OptimizerState(total_steps=epochs * steps_per_epoch,
                           peak_lr=peak_lr, warmup=warmup,
                           weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    step_losses = []
    epoch_losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_sum = 0.0
        for batch_id, chunk in enumerate(_batches(order, batch_size)):
            batch = encode_batch([examples[i] for i in chunk], vocab,
                                 config.architecture, max_len=max_len)
            for _, tensor in named:
                tensor.grad = None
            logits = forward(params, config, batch, store=store,
                             use_knowledge=use_knowledge)
            loss = cross_entropy(logits, batch.labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss {value} at step {state.step + 1} "
                    f"(epoch {epoch + 1}, batch {batch_id})"
                )
            loss.backward()
            if clip_norm:
                clip_gradients(named, clip_norm)
            adam_step(named, state)
            step_losses.append(value)
            epoch_sum += value
        epoch_losses.append(epoch_sum / steps_per_epoch)
        logger.info("epoch %d/%d: mean loss %.4f", epoch + 1, epochs,
                    epoch_losses[-1])
    return state, {"step_loss": step_losses, "epoch_loss": epoch_losses}


def evaluate(params, config, examples, vocab, store=None,
             use_knowledge=False, batch_size=32, max_len=None):
    """Deterministic forward passes over the data; returns Metrics."""
    gold, predicted = [], []
    for start in range(0, len(examples), batch_size):
        batch = encode_batch(examples[start:start + batch_size], vocab,
                             config.architecture, max_len=max_len)
        logits = forward(params, config, batch, store=store,
                         use_knowledge=use_knowledge)
        predicted.extend(int(i) for i in np.argmax(logits.data, axis=-1))
        gold.extend(int(i) for i in batch.labels)
    return metrics_from_predictions(gold, predicted)


def _substitution_pair(example):
    if example.provenance is not None:
        pos = example.provenance[0]
        return example.premise[pos], example.hypothesis[pos]
    if len(example.premise) == len(example.hypothesis):
        diffs = [i for i, (a, b) in enumerate(zip(example.premise,
                                                  example.hypothesis))
                 if a != b]
        if len(diffs) == 1:
            return example.premise[diffs[0]], example.hypothesis[diffs[0]]
    return None


def evaluate_rule_baseline(store, examples, abstain_label="neutral"):
    """Rule-baseline Metrics over substitution examples.

    The substituted pair comes from provenance, or from the unique
    differing position; examples without one fall back to the abstain
    label, as do pairs the store does not know.
    """
    gold, predicted = [], []
    for ex in examples:
        pair = _substitution_pair(ex)
        label = ABSTAIN if pair is None else wordnet_rule_predict(store, pair)
        if label == ABSTAIN:
            label = abstain_label
        gold.append(LABEL_TO_ID[ex.label])
        predicted.append(LABEL_TO_ID[label])
    return metrics_from_predictions(gold, predicted)


# -- experiment harness ---------------------------------------------------------


@dataclass
class ScenarioResult:
    """Median-over-seeds outcome of one knowledge-switch scenario."""

    scenario: str
    clean_accuracy: float
    adversarial_accuracy: float
    adv_precision: tuple = (0.0, 0.0, 0.0)
    adv_recall: tuple = (0.0, 0.0, 0.0)


@dataclass
class AblationRow:
    """One modified-layer set: its metrics and the accuracy increase over
    the unbiased baseline on the adversarial split."""

    layer_set: frozenset
    clean: Metrics
    adversarial: Metrics
    increase: float


def world_vocabulary(world):
    """Vocabulary over every world word, so held-out pair words keep
    distinct (if untrained) embeddings, like unseen words with pretrained
    vectors at full scale."""
    return Vocabulary([*world.content_words, *world.filler_words])


@dataclass
class ExperimentData:
    """Fixed data for one world: training examples, a clean test set drawn
    from training pairs with fresh sentences, and the held-out-pair
    adversarial test set."""

    vocab: Vocabulary
    train: list
    clean: list
    adversarial: list


def make_experiment_data(world, data_seed, n_train, n_test, template_len=7):
    train, adversarial = gen_examples(world, data_seed, n_train, n_test,
                                      template_len=template_len)
    clean, _ = gen_examples(world, data_seed + 1, n_test, 0,
                            template_len=template_len)
    return ExperimentData(world_vocabulary(world), train, clean, adversarial)


def _train_and_eval(config, data, store, seed, train_knowledge, epochs,
                    batch_size, peak_lr):
    params = init_params(config, seed=seed)
    train(params, config, data.train, data.vocab, store=store,
          use_knowledge=train_knowledge, epochs=epochs, batch_size=batch_size,
          seed=seed, peak_lr=peak_lr)
    out = {}
    for infer_knowledge in (True, False):
        clean = evaluate(params, config, data.clean, data.vocab, store=store,
                         use_knowledge=infer_knowledge, batch_size=batch_size)
        adv = evaluate(params, config, data.adversarial, data.vocab,
                       store=store, use_knowledge=infer_knowledge,
                       batch_size=batch_size)
        out[infer_knowledge] = (clean, adv)
    return out


def scenario_grid(config, world, data, seeds=(1, 2, 3), epochs=5,
                  batch_size=32, peak_lr=1.5e-3):
    """Train with and without knowledge, evaluate each with and without
    knowledge at inference; medians over seeds per scenario."""
    per_scenario = {s: {"clean": [], "adv": [], "p": [], "r": []}
                    for s in SCENARIOS}
    for seed in seeds:
        for train_flag in (True, False):
            results = _train_and_eval(config, data, world.store, seed,
                                      train_flag, epochs, batch_size, peak_lr)
            for infer_flag in (True, False):
                name = (f"train{'+' if train_flag else '-'}"
                        f"infer{'+' if infer_flag else '-'}")
                clean, adv = results[infer_flag]
                bucket = per_scenario[name]
                bucket["clean"].append(clean.accuracy)
                bucket["adv"].append(adv.accuracy)
                bucket["p"].append(adv.precision)
                bucket["r"].append(adv.recall)
    out = []
    for name in SCENARIOS:
        bucket = per_scenario[name]
        out.append(ScenarioResult(
            scenario=name,
            clean_accuracy=statistics.median(bucket["clean"]),
            adversarial_accuracy=statistics.median(bucket["adv"]),
            adv_precision=tuple(statistics.median(col)
                                for col in zip(*bucket["p"])),
            adv_recall=tuple(statistics.median(col)
                             for col in zip(*bucket["r"])),
        ))
    return out


def ablate_layers(config, world, data, layer_sets, seed=1, epochs=5,
                  batch_size=32, peak_lr=1.5e-3):
    """Train one model per modified-layer set (same seed) and report the
    adversarial-accuracy increase over the mandatory empty-set baseline."""
    sets = [frozenset(s) for s in layer_sets]
    # the baseline runs first so every row can report an increase over it
    sets = [frozenset()] + [s for s in sets if s != frozenset()]
    rows = []
    baseline_adv = None
    for layer_set in sets:
        run_config = replace(config, modified_layers=layer_set)
        params = init_params(run_config, seed=seed)
        use_knowledge = bool(layer_set)
        train(params, run_config, data.train, data.vocab, store=world.store,
              use_knowledge=use_knowledge, epochs=epochs,
              batch_size=batch_size, seed=seed, peak_lr=peak_lr)
        clean = evaluate(params, run_config, data.clean, data.vocab,
                         store=world.store, use_knowledge=use_knowledge,
                         batch_size=batch_size)
        adv = evaluate(params, run_config, data.adversarial, data.vocab,
                       store=world.store, use_knowledge=use_knowledge,
                       batch_size=batch_size)
        if layer_set == frozenset():
            baseline_adv = adv.accuracy
        rows.append(AblationRow(layer_set, clean, adv,
                                adv.accuracy - baseline_adv))
    return rows


# -- report files -----------------------------------------------------------------


_TSV_HEADER = ("run-id", "scenario/layer-set", "clean-accuracy",
               "adversarial-accuracy", "P_e", "P_n", "P_c", "R_e", "R_n", "R_c")


def format_layer_set(layer_set):
    return "{" + ",".join(str(i) for i in sorted(layer_set)) + "}"


def write_report(path, records, rows):
    """key=value header lines, then the fixed-column TSV table.

    rows are (run_id, label, clean_acc, adv_acc, precision3, recall3).
    """
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in records.items():
            fh.write(f"{key}={value}\n")
        fh.write("\t".join(_TSV_HEADER) + "\n")
        for run_id, label, clean_acc, adv_acc, precision, recall in rows:
            cells = [str(run_id), label, f"{clean_acc:.4f}", f"{adv_acc:.4f}",
                     *(f"{v:.4f}" for v in precision),
                     *(f"{v:.4f}" for v in recall)]
            fh.write("\t".join(cells) + "\n")


def scenario_report_rows(results, run_id):
    return [(run_id, r.scenario, r.clean_accuracy, r.adversarial_accuracy,
             r.adv_precision, r.adv_recall) for r in results]


def ablation_report_rows(rows, run_id):
    return [(run_id, format_layer_set(r.layer_set), r.clean.accuracy,
             r.adversarial.accuracy, r.adversarial.precision,
             r.adversarial.recall) for r in rows]
