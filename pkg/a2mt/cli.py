"""
Command-line surface: `a2mt <command> [flags]`.

Every command resolves settings (schema defaults <- --config file <- flags),
writes resolved_config.ini next to its outputs and derives all randomness
from the single --seed.
"""

import argparse
import logging
import sys

import numpy as np

from a2mt import hooks
from a2mt.checkpoint import load_checkpoint, params_checksum, save_checkpoint
from a2mt.evaluation import (
    acquisition_pattern,
    confusion_rows,
    confusion_vs_oracle,
    entropy_loss_table,
    evaluate_policy,
    oracle_actions_for,
    pattern_rows,
    policy_actions,
    run_cost_sweep,
    summary_rows,
    write_csv,
)
from a2mt.exceptions import A2MTError, ConfigurationError
from a2mt.learner import (
    AgentPolicy,
    Classifier,
    TrainConfig,
    build_architecture,
    check_dataset_fits,
    grad_check,
    init_params,
    make_probe,
    new_params,
    pretrain_classifier,
    train_agent,
)
from a2mt.policies import NeverPolicy, OraclePolicy, rate_matched_ablations
from a2mt.rng import EVAL_STREAM, GRADCHECK_STREAM, INIT_STREAM, PRETRAIN_STREAM, TRAIN_STREAM, numpy_generator, substream_seed
from a2mt.settings import cost_schedule, load_settings, mask_spec, output_dir, synthetic_config, train_config, write_snapshot
from a2mt.synthgen import MODALITIES, generate_dataset, load_dataset, oracle_rates, sample_dataset
from a2mt.utils import get_attr, log_error

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4


# parser

def _global_flags():
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="INI settings file")
    parent.add_argument("--seed", dest="run__seed", type=int, help="master seed")
    parent.add_argument("--out", help="output directory")
    parent.add_argument("--threads", dest="run__threads", type=int, help="worker threads")
    parent.add_argument(
        "--deterministic", dest="run__deterministic", action=argparse.BooleanOptionalAction, default=None,
        help="fixed reduction order (always in effect; --no-deterministic only logs a warning)",
    )
    parent.add_argument("--verbose", "-v", action="store_true")
    return parent


def _synthetic_flags(parser):
    parser.add_argument("--t", dest="synthetic__length", type=int)
    parser.add_argument("--digit-lo", dest="synthetic__digit_low", type=int)
    parser.add_argument("--digit-hi", dest="synthetic__digit_high", type=int)
    parser.add_argument("--counter-lo", dest="synthetic__counter_low", type=int)
    parser.add_argument("--counter-hi", dest="synthetic__counter_high", type=int)


def _train_flags(parser):
    parser.add_argument("--mode", dest="train__mode", choices=("gumbel_joint", "a2c"))
    parser.add_argument("--steps", dest="train__steps", type=int)
    parser.add_argument("--batch-size", dest="train__batch_size", type=int)
    parser.add_argument("--lr", dest="train__learning_rate", type=float)
    parser.add_argument("--tau", dest="train__tau", type=float)
    parser.add_argument("--alpha", dest="train__alpha", type=float)
    parser.add_argument("--hidden", dest="train__hidden", type=int, nargs="+")
    parser.add_argument("--pretrain-steps", dest="train__pretrain_steps", type=int)
    parser.add_argument("--log-every", dest="train__log_every", type=int)
    parser.add_argument("--masks", dest="mask__preset", choices=("full", "m1", "m1m2", "m1m2m3", "oracle"))


def build_parser():
    parent = _global_flags()
    parser = argparse.ArgumentParser(prog="a2mt", description=hooks.app_description)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[parent], help="generate train.jsonl and test.jsonl")
    _synthetic_flags(p)
    p.add_argument("--n-train", dest="synthetic__n_train", type=int)
    p.add_argument("--n-test", dest="synthetic__n_test", type=int)

    p = sub.add_parser("oracle", parents=[parent], help="oracle acquisition rates")
    _synthetic_flags(p)
    p.add_argument("--dataset", help="measure on this dataset instead of fresh draws")
    p.add_argument("--n", dest="eval__oracle_sequences", type=int)

    p = sub.add_parser("pretrain", parents=[parent], help="pretrain the classifier on masked inputs")
    _train_flags(p)
    p.add_argument("--dataset", help="training dataset (default <out>/train.jsonl)")

    p = sub.add_parser("train", parents=[parent], help="train an acquisition agent")
    _train_flags(p)
    p.add_argument("--dataset", help="training dataset (default <out>/train.jsonl)")
    p.add_argument("--cost", dest="costs__cost", type=float, nargs="+")
    p.add_argument("--classifier", help="pretrained classifier checkpoint (a2c mode)")

    p = sub.add_parser("eval", parents=[parent], help="compare a trained agent with the oracle and baselines")
    p.add_argument("--dataset", help="test dataset (default <out>/test.jsonl)")
    p.add_argument("--agent", help="agent checkpoint (default <out>/agent.npz)")
    p.add_argument("--oracle-classifier", help="classifier checkpoint used for the oracle column")
    p.add_argument("--cost", dest="costs__cost", type=float, nargs="+")
    p.add_argument("--repeats", dest="eval__repeats", type=int)
    p.add_argument("--greedy", dest="eval__greedy", action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("sweep", parents=[parent], help="cost sweep with rate-matched ablations")
    _train_flags(p)
    p.add_argument("--train-dataset")
    p.add_argument("--test-dataset")
    p.add_argument("--costs", dest="eval__sweep_costs", type=float, nargs="+")
    p.add_argument("--repeats", dest="eval__repeats", type=int)

    p = sub.add_parser("pattern", parents=[parent], help="per-timestep acquisition patterns")
    p.add_argument("--dataset", help="test dataset (default <out>/test.jsonl)")
    p.add_argument("--agent", help="agent checkpoint; its rates drive the ablations")
    p.add_argument("--rates", type=float, nargs="+", help="per-modality rates for the ablations when no agent is given")

    p = sub.add_parser("gradcheck", parents=[parent], help="reverse-mode vs finite-difference gradients")
    _synthetic_flags(p)
    p.add_argument("--eps", dest="eval__gradcheck_eps", type=float)
    p.add_argument("--coords", dest="eval__gradcheck_coords", type=int)
    p.add_argument("--hidden", dest="train__hidden", type=int, nargs="+")
    return parser


def collect_overrides(args):
    overrides = {}
    for key, value in vars(args).items():
        if "__" in key and value is not None:
            section, field = key.split("__", 1)
            overrides.setdefault(section, {})[field] = value
    return overrides


# helpers

def _dataset(args_path, out, name):
    return load_dataset(args_path or out / name)


def _finish(settings, out):
    path = write_snapshot(settings, out)
    logger.debug("settings snapshot at %s", path)
    return 0


def _curve_rows(history):
    rows = []
    for entry in history:
        row = {k: v for k, v in entry.items() if k != "rates"}
        row.update({f"{name}_rate": rate for name, rate in zip(MODALITIES, entry["rates"])})
        rows.append(row)
    return rows


def _load_classifier_into(params, path):
    source, _, _ = load_checkpoint(path)
    block = source.blocks["classifier"]
    if block.layout != params.blocks["classifier"].layout:
        raise ConfigurationError(f"classifier in {path} does not match the configured architecture")
    params.blocks["classifier"].flat[:] = block.flat
    return params


def _params_for(path, dataset):
    params, _, _ = load_checkpoint(path)
    check_dataset_fits(params.arch, dataset.config)
    return params


def _pretrained(settings, dataset, cfg, classifier_path=None):
    """Fresh params for cfg.mode with a classifier either loaded or pretrained."""
    params = new_params(dataset, cfg, numpy_generator(cfg.seed, INIT_STREAM))
    if classifier_path:
        return _load_classifier_into(params, classifier_path)
    rng = numpy_generator(cfg.seed, PRETRAIN_STREAM)
    params, _, _ = pretrain_classifier(params, dataset, mask_spec(settings), cfg, rng)
    return params


# commands

def gen(args, settings):
    out = output_dir(settings, args.out)
    cfg = synthetic_config(settings)
    paths = generate_dataset(
        cfg, settings.synthetic.n_train, settings.synthetic.n_test, settings.run.seed, out,
        threads=settings.run.threads,
    )
    for split, path in paths.items():
        print(f"{split}\t{path}")
    return _finish(settings, out)


def oracle(args, settings):
    out = output_dir(settings, args.out)
    if args.dataset:
        dataset = load_dataset(args.dataset)
        digit_rate, counter_rate = oracle_actions_for(dataset).mean(axis=(0, 1)).tolist()
    else:
        digit_rate, counter_rate = oracle_rates(
            synthetic_config(settings), settings.eval.oracle_sequences, settings.run.seed
        )
    print(f"digit_rate\t{digit_rate:.4f}")
    print(f"counter_rate\t{counter_rate:.4f}")
    return _finish(settings, out)


def pretrain(args, settings):
    out = output_dir(settings, args.out)
    dataset = _dataset(args.dataset, out, "train.jsonl")
    cfg = train_config(settings)
    params = new_params(dataset, cfg, numpy_generator(cfg.seed, INIT_STREAM))
    params, history, optimizer = pretrain_classifier(
        params, dataset, mask_spec(settings), cfg, numpy_generator(cfg.seed, PRETRAIN_STREAM)
    )
    save_checkpoint(
        out / "classifier.npz", params, optimizer, cfg, step=len(history),
        extra={"synthetic": dataset.config.metadata(), "masks": settings.mask.preset},
    )
    if history:
        print(f"pretrain_loss\t{history[0]:.4f} -> {history[-1]:.4f}")
    print(f"checksum\t{params_checksum(params)}")
    return _finish(settings, out)


def train(args, settings):
    out = output_dir(settings, args.out)
    dataset = _dataset(args.dataset, out, "train.jsonl")
    cfg = train_config(settings)
    rng = numpy_generator(cfg.seed, TRAIN_STREAM)

    if cfg.mode == "a2c":
        params = _pretrained(settings, dataset, cfg, args.classifier)
        result = train_agent(dataset, cfg, rng, params=params, pretrained=True)
    else:
        params = new_params(dataset, cfg, numpy_generator(cfg.seed, INIT_STREAM))
        result = train_agent(dataset, cfg, rng, params=params)

    save_checkpoint(
        out / "agent.npz", result.params, result.optimizer, cfg, step=cfg.steps,
        rng_state=rng.bit_generator.state, extra={"synthetic": dataset.config.metadata()},
    )
    write_csv(out / "training_curve.csv", _curve_rows(result.history))
    print(f"checksum\t{params_checksum(result.params)}")
    return _finish(settings, out)


def evaluate(args, settings):
    out = output_dir(settings, args.out)
    dataset = _dataset(args.dataset, out, "test.jsonl")
    params = _params_for(args.agent or out / "agent.npz", dataset)
    costs = cost_schedule(settings)
    repeats, seed = settings.eval.repeats, substream_seed(settings.run.seed, EVAL_STREAM)
    batch = settings.eval.eval_batch_size
    T = dataset.config.length

    classifier = Classifier(params)
    agent, records = evaluate_policy(
        AgentPolicy(params, classifier, greedy=settings.eval.greedy), classifier, dataset, costs, repeats, seed, batch
    )
    oracle_classifier = classifier
    if args.oracle_classifier:
        oracle_classifier = Classifier(_params_for(args.oracle_classifier, dataset))

    results = {"agent": agent}
    results["oracle"], _ = evaluate_policy(
        OraclePolicy(dataset.config.counter_low), oracle_classifier, dataset, costs, repeats, seed, batch
    )
    results["never"], _ = evaluate_policy(NeverPolicy(), classifier, dataset, costs, repeats, seed, batch)
    random_rate, random_1hot = rate_matched_ablations(agent.rates, T)
    results["random_rate"], _ = evaluate_policy(random_rate, classifier, dataset, costs, repeats, seed, batch)
    results["random_1hot"], _ = evaluate_policy(random_1hot, classifier, dataset, costs, repeats, seed, batch)

    write_csv(out / "summary.csv", summary_rows(results))
    write_csv(out / "confusion.csv", confusion_rows(confusion_vs_oracle(records.actions, oracle_actions_for(dataset))))
    write_csv(out / "entropy.csv", entropy_loss_table(records))

    for name, metrics in results.items():
        rates = " ".join(f"{r:.3f}" for r in metrics.rates)
        print(f"{name}\taccuracy {metrics.accuracy:.4f}\treward {metrics.reward:.4f}\trates {rates}")
    return _finish(settings, out)


def sweep(args, settings):
    out = output_dir(settings, args.out)
    train_set = _dataset(args.train_dataset, out, "train.jsonl")
    test_set = _dataset(args.test_dataset, out, "test.jsonl")
    base = train_config(settings)
    cache = {}

    def pipeline(cost):
        cfg = train_config(settings, cost=float(cost))
        rng = numpy_generator(cfg.seed, TRAIN_STREAM)
        if cfg.mode == "a2c":
            if "pretrained" not in cache:
                cache["pretrained"] = _pretrained(settings, train_set, base)
            result = train_agent(train_set, cfg, rng, params=cache["pretrained"].copy(), pretrained=True)
        else:
            result = train_agent(train_set, cfg, rng, params=new_params(train_set, cfg, numpy_generator(cfg.seed, INIT_STREAM)))
        return AgentPolicy(result.params, greedy=settings.eval.greedy), Classifier(result.params)

    rows = run_cost_sweep(
        settings.eval.sweep_costs, pipeline, test_set, settings.eval.repeats,
        substream_seed(settings.run.seed, EVAL_STREAM),
    )
    write_csv(out / "sweep.csv", rows)
    failed = [row for row in rows if "error" in row]
    for row in rows:
        print(f"cost {row['cost']}\t" + ("failed" if "error" in row else f"agent reward {row['agent_reward']:.4f}"))
    _finish(settings, out)
    return 1 if failed and len(failed) == len(rows) else 0


def pattern(args, settings):
    out = output_dir(settings, args.out)
    dataset = _dataset(args.dataset, out, "test.jsonl")
    values = np.stack([dataset.digits, dataset.counter], axis=2)
    T = dataset.config.length
    rng = numpy_generator(settings.run.seed, EVAL_STREAM)

    patterns = {"oracle": acquisition_pattern(oracle_actions_for(dataset))}
    rates = args.rates
    if args.agent:
        params = _params_for(args.agent, dataset)
        agent_actions = policy_actions(AgentPolicy(params, greedy=settings.eval.greedy), values, rng)
        patterns["agent"] = acquisition_pattern(agent_actions)
        rates = agent_actions.mean(axis=(0, 1)).tolist()
    if rates:
        if len(rates) == 1:
            rates = rates * len(MODALITIES)
        random_rate, random_1hot = rate_matched_ablations(rates, T)
        patterns["random_rate"] = acquisition_pattern(policy_actions(random_rate, values, rng))
        patterns["random_1hot"] = acquisition_pattern(policy_actions(random_1hot, values, rng))

    write_csv(out / "pattern.csv", pattern_rows(patterns))
    print(f"pattern\t{out / 'pattern.csv'}")
    return _finish(settings, out)


def gradcheck(args, settings):
    out = output_dir(settings, args.out)
    seed = settings.run.seed
    cfg = TrainConfig(hidden=tuple(settings.train.hidden), costs=cost_schedule(settings), tau=settings.train.tau)
    synth = synthetic_config(settings)
    rng = numpy_generator(seed, GRADCHECK_STREAM)

    dataset = sample_dataset(synth, 64, seed)
    params = init_params(build_architecture(synth, cfg.hidden, "gumbel_joint"), rng, zero_output=False)
    probe = make_probe(dataset, 16, rng)

    eps, coords = settings.eval.gradcheck_eps, settings.eval.gradcheck_coords
    errors = {
        kind: grad_check(params, probe, eps, n_coords=coords, rng=rng, kind=kind, cfg=cfg)
        for kind in ("classifier", "gumbel")
    }
    for kind, error in errors.items():
        print(f"{kind}\tmax_relative_error {error:.3e}")
    _finish(settings, out)
    return 0 if max(errors.values()) < GRADCHECK_TOLERANCE else 1


# entry points

def setup_logging(verbose=False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    setup_logging(args.verbose)
    try:
        settings = load_settings(args.config, collect_overrides(args))
        if not settings.run.deterministic:
            logger.warning("every reduction runs in a fixed order; --no-deterministic has no effect")
        handler = get_attr(hooks.commands[args.command])
        return handler(args, settings) or 0
    except A2MTError as e:
        log_error(f"a2mt {args.command} failed", f"{type(e).__name__}: {e}")
        return 1
    except Exception:
        log_error(f"a2mt {args.command} failed")
        return 1


def main():
    sys.exit(dispatch())
