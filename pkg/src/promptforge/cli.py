"""Command-line entry point: gen-task, train, eval, gradcheck, trace, sweep."""

from __future__ import annotations

import argparse
import csv
import logging
import sys


from .checkpoint import Checkpoint, load_checkpoint, load_task, save_checkpoint, save_task
from .config import ConfigError, ModelConfig, TrainConfig, load_config
from .data import SyntheticTask, generate_task
from .engine import History, Model, episode_loss, forward_episode, train
from .metrics import EvalReport, evaluate, harmonic_mean, trace_episode
from .params import finite_diff_errors

log = logging.getLogger("promptforge")

GRADCHECK_TOLERANCE = 1e-4
SWEEP_PARAMS = {"N": int, "a": int, "b": int, "J": int, "lambda": float}


class UsageError(Exception):
    """Bad arguments or config; maps to exit code 2."""


def _g(x: float) -> str:
    return f"{x:.6g}"


def _pct(x: float) -> str:
    return f"{x:.2f}"


def _write_csv(path: str | None, header: list[str], rows: list[list[str]]) -> None:
    out = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            out.close()


# --- shared setup --------------------------------------------------------

def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    if not args.config:
        raise UsageError("--config is required")
    try:
        cfg, tcfg = load_config(args.config)
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.iters is not None:
            changes["N"] = args.iters
        return (cfg.replace(**changes) if changes else cfg), tcfg
    except (ConfigError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc


def _task(args, cfg: ModelConfig, tcfg: TrainConfig) -> SyntheticTask:
    if getattr(args, "task", None):
        task, _ = load_task(args.task)
        return task
    return generate_task(cfg.seed, cfg.K, tcfg.base_fraction, tcfg.shots, tcfg.noise, cfg, tcfg.test_shots)


def _model(args, cfg: ModelConfig) -> Model:
    if args.ckpt is None or args.ckpt.lower() == "none":
        return Model.build(cfg)
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.to_model()
    # run-time knobs may differ from the stored ones; shapes may not
    return model.with_config(N=cfg.N, lam=cfg.lam, tau=cfg.tau, ablate=cfg.ablate, seed=cfg.seed)


def report_rows(report: EvalReport) -> list[list[str]]:
    rows = []
    for n, (b, v) in enumerate(zip(report.base_iter_acc, report.new_iter_acc)):
        hm = 0.0 if b + v == 0 else harmonic_mean(b, v)
        rows.append([str(n), _pct(b), _pct(v), _pct(hm), str(report.episodes)])
    return rows


REPORT_HEADER = ["n", "base_acc", "new_acc", "hm", "episodes"]


def history_rows(history: History) -> list[list[str]]:
    return [[str(epoch), _g(loss)] for epoch, loss in history.rows()]


# --- commands ------------------------------------------------------------

def cmd_gen_task(args) -> int:
    cfg, tcfg = _configs(args)
    task = _task(args, cfg, tcfg)
    if not args.out:
        raise UsageError("--out is required")
    save_task(task, cfg, args.out)
    print(f"wrote task with {task.K} classes ({len(task.base_ids)} base) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg, tcfg = _configs(args)
    task = _task(args, cfg, tcfg)
    model, history = train(task, cfg, tcfg)
    if args.ckpt:
        save_checkpoint(Checkpoint.from_model(model, tcfg, epoch=tcfg.epochs), args.ckpt)
    _write_csv(args.out, ["epoch", "mean_loss"], history_rows(history))
    return 0


def cmd_eval(args) -> int:
    cfg, tcfg = _configs(args)
    task = _task(args, cfg, tcfg)
    report = evaluate(_model(args, cfg), task)
    _write_csv(args.out, REPORT_HEADER, report_rows(report))
    return 0


def gradcheck_objective(cfg: ModelConfig, model: Model, task: SyntheticTask, episodes: int = 2):
    """Sum of episode losses on the first few training images, scored against all classes."""
    images, labels = task.train.images[:episodes], task.train.labels[:episodes]

    def f(_params):
        total = None
        for img, y in zip(images, labels):
            trace = forward_episode(img, task.classes, model, label=int(y))
            loss = episode_loss(trace, int(y), cfg.lam)
            total = loss if total is None else total + loss
        return total

    return f


def cmd_gradcheck(args) -> int:
    cfg, tcfg = _configs(args)
    if cfg.N < 1:
        raise UsageError("gradcheck needs N >= 1")
    task = generate_task(cfg.seed, cfg.K, tcfg.base_fraction, 1, tcfg.noise, cfg, 1)
    model = Model.build(cfg)
    errors = finite_diff_errors(gradcheck_objective(cfg, model, task), model.params, args.step)
    worst = max(errors, key=errors.get)
    err = errors[worst]
    print(f"max relative error {err:.3e} ({worst}) over {model.params.num_trainable()} trainable scalars")
    return 0 if err <= GRADCHECK_TOLERANCE else 1


def cmd_trace(args) -> int:
    cfg, tcfg = _configs(args)
    task = _task(args, cfg, tcfg)
    model = _model(args, cfg)
    ids = task.base_ids if args.split == "base" else task.novel_ids
    split = task.test_base if args.split == "base" else task.test_novel
    classes = task.classes.subset(ids)
    position = {int(c): i for i, c in enumerate(ids)}
    episodes = _int_list(args.episodes) if args.episodes else list(range(min(8, len(split))))
    rows = []
    for e in episodes:
        if not 0 <= e < len(split):
            raise UsageError(f"episode {e} out of range (split has {len(split)})")
        probs = trace_episode(model, split.images[e], classes).probabilities()
        label = position[int(split.labels[e])]
        for n, row in enumerate(probs):
            for k, p in enumerate(row):
                rows.append([args.split, str(e), str(label), str(n), str(int(ids[k])), _g(p)])
    _write_csv(args.out, ["split", "episode", "label", "n", "class", "prob"], rows)
    return 0


def cmd_sweep(args) -> int:
    cfg, tcfg = _configs(args)
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"--param must be one of {sorted(SWEEP_PARAMS)}")
    if not args.values:
        raise UsageError("--values is required")
    kind = SWEEP_PARAMS[args.param]
    try:
        values = [kind(v) for v in args.values.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --values: {exc}") from exc
    field = "lam" if args.param == "lambda" else args.param
    rows = []
    for value in values:
        try:
            run_cfg = cfg.replace(**{field: value})
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
        task = _task(args, run_cfg, tcfg)
        model, history = train(task, run_cfg, tcfg)
        report = evaluate(model, task)
        final = history.epoch_loss[-1] if history.epoch_loss else float("nan")
        rows.append([args.param, _g(value), _pct(report.base_acc), _pct(report.new_acc),
                     _pct(report.hm), _g(final)])
        log.info("%s=%s: base %.2f new %.2f hm %.2f", args.param, value,
                 report.base_acc, report.new_acc, report.hm)
    _write_csv(args.out, ["param", "value", "base_acc", "new_acc", "hm", "final_loss"], rows)
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of integers: {exc}") from exc


COMMANDS = {
    "gen-task": cmd_gen_task, "train": cmd_train, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "trace": cmd_trace, "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file (bundled: toy.cfg, reference.cfg, paper.cfg)")
        p.add_argument("--ckpt", help="checkpoint path; 'none' means untrained weights")
        p.add_argument("--out", help="output path (CSV, or task file for gen-task)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--iters", type=int, help="override N")
        p.add_argument("--task", help="read the task from a gen-task file instead of generating it")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            p.add_argument("--param", required=True, help="one of N, a, b, J, lambda")
            p.add_argument("--values", required=True, help="comma-separated grid")
        if name == "trace":
            p.add_argument("--episodes", help="comma-separated test episode indices (default 0..7)")
            p.add_argument("--split", choices=("base", "novel"), default="base")
        if name == "gradcheck":
            p.add_argument("--step", type=float, default=1e-5)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be unsigned", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())
