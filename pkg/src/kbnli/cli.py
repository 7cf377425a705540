"""Command-line interface.

Subcommands: gen-data, train, eval, baseline, gradcheck, ablate, scenarios.
Every run writes config.resolved into the report directory; training also
writes history.tsv, a model checkpoint, and a vocab.txt sidecar (checkpoints
store parameters and model config, not the word list). Metrics land in
metrics.tsv with one row per evaluation, scenario, or layer set.
"""

import argparse
import logging
import os
import sys

from . import data as data_mod
from . import training
from .knowledge import LABELS, load_relations, save_relations
from .models import (
    ModelConfig,
    config_to_text,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)


def _parse_layer_set(text):
    return frozenset(int(x) for x in text.split(",") if x.strip())


def _parse_layer_sets(text):
    return [_parse_layer_set(part) for part in text.split(";") if part.strip()]


def _parse_seeds(text):
    seeds = tuple(int(x) for x in text.split(",") if x.strip())
    if not seeds:
        raise ValueError(f"no seeds in {text!r}")
    return seeds


def _add_model_flags(parser, d_model=300, heads=5, d_ff=None, n_layers=1,
                     n_cross=1, modified_layers="", max_positions=64):
    group = parser.add_argument_group("model")
    group.add_argument("--architecture", choices=data_mod.ARCHITECTURES,
                       default="model1")
    group.add_argument("--n-layers", type=int, default=n_layers)
    group.add_argument("--n-cross", type=int, default=n_cross)
    group.add_argument("--heads", type=int, default=heads)
    group.add_argument("--d-model", type=int, default=d_model)
    group.add_argument("--d-ff", type=int, default=d_ff)
    group.add_argument("--bias-b", type=float, default=10.0)
    group.add_argument("--modified-layers", default=modified_layers,
                       help="comma-separated layer numbers, e.g. 1,2; "
                            "empty for none")
    group.add_argument("--max-positions", type=int, default=max_positions)
    group.add_argument("--n-labels", type=int, default=3)


def _config_from_args(args, vocab_size, seed=None):
    return ModelConfig(
        architecture=args.architecture,
        n_layers=args.n_layers,
        n_cross=args.n_cross,
        heads=args.heads,
        d_model=args.d_model,
        d_ff=args.d_ff,
        bias_b=args.bias_b,
        modified_layers=_parse_layer_set(args.modified_layers),
        vocab_size=vocab_size,
        max_positions=args.max_positions,
        n_labels=args.n_labels,
        seed=args.seed if seed is None else seed,
    )


def _add_world_flags(parser):
    group = parser.add_argument_group("synthetic world")
    group.add_argument("--world-seed", type=int, default=1)
    group.add_argument("--n-words", type=int, default=200)
    group.add_argument("--pairs-per-relation", type=int, default=40)
    group.add_argument("--n-fillers", type=int, default=30)
    group.add_argument("--train-fraction", type=float, default=0.7)
    group.add_argument("--data-seed", type=int, default=1)
    group.add_argument("--n-train", type=int, default=4000)
    group.add_argument("--n-test", type=int, default=1000)
    group.add_argument("--template-len", type=int, default=7)


def _add_train_flags(parser, peak_lr):
    group = parser.add_argument_group("optimization")
    group.add_argument("--epochs", type=int, default=5)
    group.add_argument("--batch-size", type=int, default=32)
    group.add_argument("--peak-lr", type=float, default=peak_lr)
    group.add_argument("--warmup", type=float, default=0.1)
    group.add_argument("--clip-norm", type=float, default=1.0,
                       help="global gradient-norm cap; 0 disables clipping")
    group.add_argument("--weight-decay", type=float, default=0.0)
    group.add_argument("--max-len", type=int, default=None)


def _report_dir(args):
    os.makedirs(args.report_dir, exist_ok=True)
    return args.report_dir


def _write_resolved(path, lines, config=None):
    """config.resolved: model config first (when there is one), then the
    run-level key=value lines."""
    with open(os.path.join(path, "config.resolved"), "w",
              encoding="utf-8") as fh:
        if config is not None:
            fh.write(config_to_text(config))
        for key, value in lines.items():
            fh.write(f"{key}={value}\n")


def _metrics_kv(metrics):
    p, r = metrics.precision, metrics.recall
    return {"accuracy": f"{metrics.accuracy:.4f}",
            "count": metrics.count,
            **{f"P_{c[0]}": f"{v:.4f}" for c, v in zip(LABELS, p)},
            **{f"R_{c[0]}": f"{v:.4f}" for c, v in zip(LABELS, r)}}


def _print_metrics(name, metrics):
    parts = " ".join(f"{k}={v}" for k, v in _metrics_kv(metrics).items())
    print(f"{name}: {parts}")


def _single_eval_report(out, run_id, label, metrics, records):
    rows = [(run_id, label, metrics.accuracy, metrics.accuracy,
             metrics.precision, metrics.recall)]
    training.write_report(os.path.join(out, "metrics.tsv"),
                          {"run-id": run_id, **records}, rows)


def _load_store(args):
    if getattr(args, "relations", None):
        return load_relations(args.relations)
    return None


def _load_or_build_vocab(args, examples):
    if getattr(args, "vocab", None):
        return data_mod.load_vocab(args.vocab)
    return data_mod.build_vocab(examples)


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args):
    out = _report_dir(args)
    world = data_mod.gen_world(args.world_seed, n_words=args.n_words,
                               pairs_per_relation=args.pairs_per_relation,
                               n_fillers=args.n_fillers,
                               train_fraction=args.train_fraction)
    exp = training.make_experiment_data(world, args.data_seed, args.n_train,
                                        args.n_test,
                                        template_len=args.template_len)
    save_relations(world.store, os.path.join(out, "relations.tsv"))
    data_mod.save_tsv(exp.train, os.path.join(out, "train.tsv"))
    data_mod.save_tsv(exp.clean, os.path.join(out, "clean.tsv"))
    data_mod.save_tsv(exp.adversarial, os.path.join(out, "test.tsv"))
    data_mod.save_vocab(exp.vocab, os.path.join(out, "vocab.txt"))
    _write_resolved(out, {
        "command": "gen-data", "world-seed": args.world_seed,
        "n-words": args.n_words,
        "pairs-per-relation": args.pairs_per_relation,
        "n-fillers": args.n_fillers, "train-fraction": args.train_fraction,
        "data-seed": args.data_seed, "n-train": args.n_train,
        "n-test": args.n_test, "template-len": args.template_len,
    })
    print(f"wrote world ({len(world.store)} relation pairs, "
          f"{len(exp.vocab)} words) and datasets to {out}")
    return 0


def cmd_train(args):
    out = _report_dir(args)
    examples = data_mod.load_tsv(args.train_file)
    vocab = _load_or_build_vocab(args, examples)
    store = _load_store(args)
    use_knowledge = store is not None and not args.no_knowledge
    config = _config_from_args(args, len(vocab))
    params = init_params(config, seed=args.seed)
    state, history = training.train(
        params, config, examples, vocab, store=store,
        use_knowledge=use_knowledge, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed, peak_lr=args.peak_lr,
        warmup=args.warmup, clip_norm=args.clip_norm,
        weight_decay=args.weight_decay, max_len=args.max_len)

    checkpoint = args.checkpoint or os.path.join(out, "model.ckpt")
    save_checkpoint(params, config, checkpoint)
    data_mod.save_vocab(vocab, os.path.join(out, "vocab.txt"))
    steps_per_epoch = len(history["step_loss"]) // args.epochs
    with open(os.path.join(out, "history.tsv"), "w", encoding="utf-8") as fh:
        fh.write("step\tepoch\tloss\n")
        for i, loss in enumerate(history["step_loss"]):
            fh.write(f"{i + 1}\t{i // steps_per_epoch + 1}\t{loss:.6f}\n")

    eval_examples = (data_mod.load_tsv(args.eval_file) if args.eval_file
                     else examples)
    metrics = training.evaluate(params, config, eval_examples, vocab,
                                store=store, use_knowledge=use_knowledge,
                                batch_size=args.batch_size,
                                max_len=args.max_len)
    run_id = f"train-s{args.seed}"
    records = {"final-loss": f"{history['epoch_loss'][-1]:.6f}",
               "skipped-gradients": state.skipped,
               "checkpoint": checkpoint, **_metrics_kv(metrics)}
    _single_eval_report(out, run_id, "eval", metrics, records)
    _write_resolved(out, {
        "command": "train", "train-file": args.train_file,
        "relations": args.relations or "", "epochs": args.epochs,
        "batch-size": args.batch_size, "peak-lr": repr(args.peak_lr),
        "warmup": repr(args.warmup), "clip-norm": repr(args.clip_norm),
        "weight-decay": repr(args.weight_decay),
        "use-knowledge": use_knowledge, "checkpoint": checkpoint,
    }, config)
    _print_metrics(run_id, metrics)
    return 0


def cmd_eval(args):
    out = _report_dir(args)
    params, config = load_checkpoint(args.checkpoint)
    vocab = data_mod.load_vocab(args.vocab)
    if len(vocab) != config.vocab_size:
        raise ValueError(f"{args.vocab}: {len(vocab)} words, but the "
                         f"checkpoint was trained with {config.vocab_size}")
    examples = data_mod.load_tsv(args.data_file)
    store = _load_store(args)
    use_knowledge = store is not None and not args.no_knowledge
    metrics = training.evaluate(params, config, examples, vocab, store=store,
                                use_knowledge=use_knowledge,
                                batch_size=args.batch_size,
                                max_len=args.max_len)
    run_id = f"eval-s{config.seed}"
    _single_eval_report(out, run_id, "eval", metrics, _metrics_kv(metrics))
    _write_resolved(out, {
        "command": "eval", "checkpoint": args.checkpoint,
        "data-file": args.data_file, "relations": args.relations or "",
        "use-knowledge": use_knowledge,
    }, config)
    _print_metrics(run_id, metrics)
    return 0


def cmd_baseline(args):
    out = _report_dir(args)
    store = load_relations(args.relations)
    examples = data_mod.load_tsv(args.data_file)
    metrics = training.evaluate_rule_baseline(store, examples,
                                              abstain_label=args.abstain_label)
    run_id = "baseline"
    _single_eval_report(out, run_id, "rule-baseline", metrics,
                        _metrics_kv(metrics))
    _write_resolved(out, {
        "command": "baseline", "relations": args.relations,
        "data-file": args.data_file, "abstain-label": args.abstain_label,
    })
    _print_metrics(run_id, metrics)
    return 0


def cmd_gradcheck(args):
    from .models import gradient_check

    config = _config_from_args(args, vocab_size=12)
    worst = gradient_check(config, seed=args.seed, min_samples=args.samples)
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < 1e-4 else 1


def _experiment_setup(args):
    world = data_mod.gen_world(args.world_seed, n_words=args.n_words,
                               pairs_per_relation=args.pairs_per_relation,
                               n_fillers=args.n_fillers,
                               train_fraction=args.train_fraction)
    data = training.make_experiment_data(world, args.data_seed, args.n_train,
                                         args.n_test,
                                         template_len=args.template_len)
    return world, data


def _experiment_records(args, extra):
    return {"world-seed": args.world_seed, "data-seed": args.data_seed,
            "n-train": args.n_train, "n-test": args.n_test,
            "epochs": args.epochs, "peak-lr": repr(args.peak_lr), **extra}


def cmd_ablate(args):
    out = _report_dir(args)
    world, data = _experiment_setup(args)
    config = _config_from_args(args, len(data.vocab))
    layer_sets = _parse_layer_sets(args.layer_sets)
    rows = training.ablate_layers(config, world, data, layer_sets,
                                  seed=args.seed, epochs=args.epochs,
                                  batch_size=args.batch_size,
                                  peak_lr=args.peak_lr)
    run_id = f"ablate-s{args.seed}"
    increases = {f"increase-{training.format_layer_set(r.layer_set)}":
                 f"{r.increase:+.4f}" for r in rows}
    records = {"run-id": run_id, "command": "ablate",
               **_experiment_records(args, increases)}
    training.write_report(os.path.join(out, "metrics.tsv"), records,
                          training.ablation_report_rows(rows, run_id))
    _write_resolved(out, records, config)
    for r in rows:
        print(f"{training.format_layer_set(r.layer_set)}: "
              f"clean={r.clean.accuracy:.4f} "
              f"adversarial={r.adversarial.accuracy:.4f} "
              f"increase={r.increase:+.4f}")
    return 0


def cmd_scenarios(args):
    out = _report_dir(args)
    world, data = _experiment_setup(args)
    seeds = _parse_seeds(args.seeds)
    config = _config_from_args(args, len(data.vocab), seed=seeds[0])
    if not config.modified_layers:
        raise ValueError("scenarios needs --modified-layers (the "
                         "knowledge-on runs have nowhere to apply bias)")
    results = training.scenario_grid(config, world, data, seeds=seeds,
                                     epochs=args.epochs,
                                     batch_size=args.batch_size,
                                     peak_lr=args.peak_lr)
    run_id = f"scenarios-s{','.join(str(s) for s in seeds)}"
    records = {"run-id": run_id, "command": "scenarios",
               **_experiment_records(args, {"seeds": args.seeds})}
    training.write_report(os.path.join(out, "metrics.tsv"), records,
                          training.scenario_report_rows(results, run_id))
    _write_resolved(out, records, config)
    for r in results:
        print(f"{r.scenario}: clean={r.clean_accuracy:.4f} "
              f"adversarial={r.adversarial_accuracy:.4f}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kbnli",
        description="knowledge-biased attention models for NLI")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic world and "
                                        "train/clean/test TSVs")
    _add_world_flags(p)
    p.add_argument("--report-dir", "--out-dir", default=".")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a TSV dataset")
    p.add_argument("--train-file", required=True)
    p.add_argument("--eval-file", default=None)
    p.add_argument("--vocab", default=None,
                   help="vocabulary file; built from training data if absent")
    p.add_argument("--relations", default=None)
    p.add_argument("--no-knowledge", action="store_true",
                   help="ignore the relation store during training")
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint path (default: <report-dir>/model.ckpt)")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--report-dir", default=".")
    _add_model_flags(p)
    _add_train_flags(p, peak_lr=1e-4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a TSV dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data-file", required=True)
    p.add_argument("--relations", default=None)
    p.add_argument("--no-knowledge", action="store_true",
                   help="disable knowledge bias at inference")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--report-dir", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="rule-based substitution baseline")
    p.add_argument("--relations", required=True)
    p.add_argument("--data-file", required=True)
    p.add_argument("--abstain-label", choices=LABELS, default="neutral")
    p.add_argument("--report-dir", default=".")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    _add_model_flags(p, d_model=8, heads=2, d_ff=16, max_positions=16)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="bias one layer set at a time and "
                                      "compare against the unbiased baseline")
    _add_world_flags(p)
    p.add_argument("--layer-sets", default="1",
                   help="semicolon-separated layer sets, e.g. '1;1,2'")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--report-dir", default=".")
    _add_model_flags(p, d_model=30, modified_layers="1")
    _add_train_flags(p, peak_lr=1.5e-3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("scenarios", help="knowledge on/off grid over "
                                         "training and inference")
    _add_world_flags(p)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--report-dir", default=".")
    _add_model_flags(p, d_model=30, modified_layers="1")
    _add_train_flags(p, peak_lr=1.5e-3)
    p.set_defaults(func=cmd_scenarios)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
