"""Command-line entry point: ``hccp <subcommand> [options]``.

Every command writes into a fresh run directory under ``--out`` whose name
is derived from the command, resolved config and inputs; an existing
directory is never reused, a numeric suffix is added instead.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .cascade_sim import generate_dataset, generate_world
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .domain import read_logs, write_logs
from .losses import gradient_profiles
from .model import load_checkpoint, save_checkpoint
from .sampler import add_inbatch_negatives, build_listwise_batch
from .trainer import Variant, evaluate, octile_summary, run_ablation, train

log = logging.getLogger("hccp")

COMMANDS = ("simulate", "build-samples", "train", "eval", "ablate", "gradcheck", "profile-gradients")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hccp", description="Pre-ranking sample construction, training and evaluation.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="experiment config (YAML or JSON)")
        sp.add_argument("--seed", type=int, help="override the command's seed")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="base output directory")
        return sp

    add("simulate", "simulate train and eval request logs")

    sp = add("build-samples", "write the sampled training instances of one epoch as JSON lines")
    sp.add_argument("--data", type=Path, required=True, help="request log file")
    sp.add_argument("--max-batches", type=int, help="stop after this many batches")

    sp = add("train", "train one variant; writes checkpoint and manifest")
    sp.add_argument("--data", type=Path, required=True, help="training request log file")
    sp.add_argument("--variant", default="HCCP_full", help="training variant")

    sp = add("eval", "evaluate a checkpoint on a request log file")
    sp.add_argument("--model", type=Path, required=True, help="checkpoint written by train")
    sp.add_argument("--data", type=Path, required=True, help="eval request log file")
    sp.add_argument("--k", type=_int_list, help="comma-separated hit-rate cutoffs")

    sp = add("ablate", "train and evaluate a variant x seed grid")
    sp.add_argument("--data", type=Path, help="directory holding train.jsonl and eval.jsonl (simulated if absent)")
    sp.add_argument("--variant", type=_str_list, help="comma-separated variants")

    sp = add("gradcheck", "finite-difference check of every loss gradient")
    sp.add_argument("--cases", type=int, default=gradcheck.DEFAULT_CASES, help="random cases per suite")
    sp.add_argument("--suite", type=_str_list, help="comma-separated subset of suites")
    sp.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook: perturb one suite's gradient

    sp = add("profile-gradients", "tabulate the margin-loss and BCE negative-gradient curves")
    sp.add_argument("--tau", type=float, default=0.1)
    sp.add_argument("--c", type=float, default=5.0)
    sp.add_argument("--q", type=float, default=1.0)
    sp.add_argument("--y-min", type=float, default=-5.0)
    sp.add_argument("--y-max", type=float, default=15.0)
    sp.add_argument("--step", type=float, default=0.01)
    return p


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _str_list(text: str) -> tuple:
    return tuple(x for x in text.split(",") if x)


def run_dir(base: Path, command: str, stamp: dict) -> Path:
    digest = hashlib.sha256(json.dumps(stamp, sort_keys=True, default=str).encode()).hexdigest()[:10]
    path = base / f"{command}-{digest}"
    n = 1
    while path.exists():
        path = base / f"{command}-{digest}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _world(config: ExperimentConfig):
    w = config.world
    return generate_world(w.n_users, w.n_items, w.d_true, w.seed, w.popularity_exponent, w.cross_noise, w.cross_rank)


def _cross_fn(config: ExperimentConfig):
    return _world(config).cross_score if config.model.cross_weight else None


def _write(path: Path, text: str) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n")


def cmd_simulate(args, config: ExperimentConfig) -> Path:
    if args.seed is not None:
        config = config.with_overrides(world={"seed": args.seed})
    out = run_dir(args.out, "simulate", {"config": config.to_dict()})
    world = _world(config)
    d = config.data
    write_logs(generate_dataset(world, config.sim, d.n_train, d.train_seed), out / "train.jsonl")
    write_logs(generate_dataset(world, config.sim, d.n_eval, d.eval_seed), out / "eval.jsonl")
    dump_config(config, out / "config.yaml")
    return out


def cmd_build_samples(args, config: ExperimentConfig) -> Path:
    seed = config.train.seed if args.seed is None else args.seed
    out = run_dir(args.out, "samples", {"config": config.to_dict(), "seed": seed, "data": _file_digest(args.data)})
    data = read_logs(args.data)
    rng = np.random.default_rng(seed)
    cross = _world(config).cross_score
    bs = config.train.batch_size
    order = rng.permutation(len(data))
    with (out / "samples.jsonl").open("w") as fh:
        for b, start in enumerate(range(0, len(order), bs)):
            if args.max_batches is not None and b >= args.max_batches:
                break
            logs = [data.logs[i] for i in order[start:start + bs]]
            batch = build_listwise_batch(logs, config.sampler, rng, data.n_items, cross)
            batch = add_inbatch_negatives(batch, config.sampler.inbatch_rate, rng)
            for req, inst in batch.instances():
                rec = {"batch": b, "request": int(order[start + req]), **inst.to_json()}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    dump_config(config, out / "config.yaml")
    return out


def cmd_train(args, config: ExperimentConfig) -> Path:
    variant = Variant.parse(args.variant)
    seed = config.train.seed if args.seed is None else args.seed
    data = read_logs(args.data)
    out = run_dir(args.out, "train", {"config": config.to_dict(), "seed": seed, "variant": variant.value,
                                      "data": _file_digest(args.data)})
    result = train(variant, data, config, seed, _cross_fn(config))
    save_checkpoint(result.model, out / "model.npz")
    _write(out / "manifest.json", result.manifest.to_json())
    np.savetxt(out / "loss_history.txt", result.loss_history, fmt="%.10g")
    return out


def cmd_eval(args, config: ExperimentConfig) -> Path:
    if args.k:
        config = config.with_overrides(eval={"ks": list(args.k)})
    model = load_checkpoint(args.model)
    data = read_logs(args.data)
    out = run_dir(args.out, "eval", {"config": config.to_dict(), "model": _file_digest(args.model),
                                     "data": _file_digest(args.data)})
    report = evaluate(model, data, config, _cross_fn(config))
    _write(out / "report.json", report.to_json())
    _write(out / "report.txt", report.table())
    print(report.table())
    return out


def cmd_ablate(args, config: ExperimentConfig) -> Path:
    if args.variant:
        config = config.with_overrides(ablation={"variants": list(args.variant)})
    if args.seed is not None:
        config = config.with_overrides(ablation={"seeds": [args.seed]})
    variants = [Variant.parse(v) for v in config.ablation.variants]
    if args.data is not None:
        train_data, eval_data = read_logs(args.data / "train.jsonl"), read_logs(args.data / "eval.jsonl")
    else:
        world, d = _world(config), config.data
        train_data = generate_dataset(world, config.sim, d.n_train, d.train_seed)
        eval_data = generate_dataset(world, config.sim, d.n_eval, d.eval_seed)
    out = run_dir(args.out, "ablate", {"config": config.to_dict(), "train": train_data.fingerprint(),
                                       "eval": eval_data.fingerprint()})
    manifests = out / "manifests"
    manifests.mkdir()

    def keep(run):
        _write(manifests / f"{run.variant}-seed{run.seed}.json", run.manifest.to_json())
        log.info("finished %s seed %d", run.variant, run.seed)

    report = run_ablation(variants, config, config.ablation.seeds, train_data, eval_data,
                          _cross_fn(config), on_run=keep)
    ec = config.eval
    doc = report.to_dict()
    text = report.table(["ISH", "ASH", "ISPH", "ASPH"], ec.ks)
    baseline = Variant.BASE.value
    if baseline in report.variants:
        for v in report.variants:
            if v == baseline:
                continue
            deltas = report.octile_deltas(v, baseline, ec.octile_metric, ec.tail_k)
            doc.setdefault("octile_deltas", {})[v] = {"per_seed": deltas, "mean": octile_summary(deltas)}
            text += f"\n\n{v} - {baseline}, {ec.octile_metric}@{ec.tail_k} per-item gain by frequency octile"
            text += "\nseed " + "".join(f"{'o' + str(o + 1):>9}" for o in range(8))
            for s, row in zip(report.seeds, deltas):
                text += f"\n{s:<5}" + "".join(f"{x:>9.4f}" if x is not None else f"{'-':>9}" for x in row)
    _write(out / "ablation.json", json.dumps(doc, sort_keys=True, indent=2))
    _write(out / "ablation.txt", text)
    print(text)
    return out


def cmd_gradcheck(args, config: ExperimentConfig) -> Path:
    seed = 0 if args.seed is None else args.seed
    suites = args.suite or gradcheck.SUITES
    if args.corrupt is not None and args.corrupt not in gradcheck.SUITES:
        raise ValueError(f"unknown suite to corrupt: {args.corrupt}")
    out = run_dir(args.out, "gradcheck", {"seed": seed, "cases": args.cases, "suites": list(suites),
                                          "corrupt": args.corrupt})
    tiny = gradcheck._TinyWorld(seed)
    results = [gradcheck.run_suite(n, args.cases, seed, args.corrupt == n, tiny) for n in suites]
    table = gradcheck.format_table(results)
    _write(out / "gradcheck.txt", table)
    print(table)
    if not all(r.passed for r in results):
        failed = [r.name for r in results if not r.passed]
        raise GradcheckFailure(f"gradient check failed for {failed}")
    return out


def cmd_profile(args, config: ExperimentConfig) -> Path:
    prof = gradient_profiles(args.y_min, args.y_max, args.q, args.c, args.tau, args.step)
    out = run_dir(args.out, "profile", prof.params | {"range": [args.y_min, args.y_max, args.step]})
    lines = ["# y\tf_margin\tg_bce", f"# crossing\t{prof.crossing if prof.crossing is not None else 'absent'}"]
    lines += [f"{y:.6f}\t{f:.10g}\t{g:.10g}" for y, f, g in zip(prof.y, prof.f, prof.g)]
    _write(out / "profile.tsv", "\n".join(lines))
    print(f"crossing y* = {prof.crossing}" if prof.crossing is not None else "no crossing in range")
    return out


class GradcheckFailure(RuntimeError):
    pass


HANDLERS = {
    "simulate": cmd_simulate,
    "build-samples": cmd_build_samples,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "profile-gradients": cmd_profile,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors exit 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config) if args.config is not None else ExperimentConfig()
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 2
    try:
        out = HANDLERS[args.command](args, config)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
