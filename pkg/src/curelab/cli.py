"""Command line: ``curelab {gen-data,train,eval,gradcheck,inspect}``.

Settings come from one YAML file plus ``--set key=value`` overrides.
Only two environment variables are read: CURELAB_OUT_DIR and CURELAB_WORKERS.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__, gradcheck, seeding
from . import checkpoint as ckpt_io
from .branching import BranchConfig, build_group, inspect_branch
from .config import ConfigError, Mode, RunConfig, from_dict, load
from .env import generate_task, task_record, write_vocab_file
from .metrics_eval import evaluate, temperature_sweep
from .trainer import dump_record, header_record, run_training

ENV_OUT_DIR = "CURELAB_OUT_DIR"
ENV_WORKERS = "CURELAB_WORKERS"

log = logging.getLogger("curelab")


def _parse_sets(pairs: Sequence[str]) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def _env_overrides() -> dict:
    out = {}
    if os.environ.get(ENV_OUT_DIR):
        out["out_dir"] = os.environ[ENV_OUT_DIR]
    if os.environ.get(ENV_WORKERS):
        out["workers"] = os.environ[ENV_WORKERS]
    return out


def resolve_config(path: str | None, sets: Sequence[str] = (), **flags) -> RunConfig:
    """File values, then environment, then flags (last wins)."""
    overrides = {**_env_overrides(), **_parse_sets(sets), **{k: v for k, v in flags.items() if v is not None}}
    return load(path, overrides)


def _write_lines(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dump_record(rec) + "\n")


def _load_checkpoint(path: str, rc: RunConfig | None):
    shapes = ckpt_io.expected_shapes(rc.vocab_size, rc.embed_dim, rc.context, rc.hidden_dim) if rc else None
    ck = ckpt_io.load(path, shapes)
    return ck, rc if rc is not None else from_dict(ck.config)


# ---- subcommands


def cmd_gen_data(args) -> int:
    rc = resolve_config(args.config, args.set, seed=args.seed, difficulty=args.difficulty)
    out = Path(args.out or Path(rc.out_dir) / "tasks.jsonl")
    vocab = rc.vocab()
    tasks = [generate_task((rc.seed, seeding.TASKS, k), rc.difficulty, vocab) for k in range(args.n)]
    _write_lines(out, [header_record("tasks", rc, count=args.n)] + [task_record(t) for t in tasks])
    write_vocab_file(out.with_name("vocab.txt"), vocab)
    print(f"wrote {args.n} tasks to {out}")
    return 0


def cmd_train(args) -> int:
    rc = resolve_config(args.config, args.set, seed=args.seed, out_dir=args.out)
    mode = Mode(args.mode)
    if mode is Mode.CURE_S2 and not args.resume:
        log.warning("cure-s2 without --resume starts from a fresh initialisation (ablation only)")
    res = run_training(rc, mode, resume=args.resume)
    s = res.summary
    if res.ok:
        print(f"{mode.value}: {s['steps_run']} steps, final entropy {s.get('final_mean_entropy', float('nan')):.4f}, "
              f"reward {s.get('final_mean_reward', float('nan')):.4f}; metrics in {res.metrics_path}")
        return 0
    print(f"{mode.value}: aborted after {s['steps_run']} steps: {s['error']}", file=sys.stderr)
    return 2


def cmd_eval(args) -> int:
    rc = resolve_config(args.config, args.set) if args.config or args.set else None
    ck, rc = _load_checkpoint(args.checkpoint, rc)
    flags = {
        "eval_k": args.k,
        "eval_temperature": args.temperature,
        "eval_top_p": args.top_p,
        "eval_tasks": args.tasks,
        "eval_seed": args.eval_seed,
    }
    rc = rc.replace(**{k: v for k, v in flags.items() if v is not None})
    ecfg = rc.eval_config()
    vocab = rc.vocab()
    res = evaluate(ck.params, ecfg, vocab, rc.max_resp_len)
    out = Path(args.out or Path(args.checkpoint).with_suffix(".eval.jsonl"))
    header = header_record(
        "eval",
        rc,
        checkpoint_digest=ck.state_digest(),
        k=ecfg.k,
        temperature=ecfg.temperature,
        top_p=ecfg.top_p,
        task_count=ecfg.task_count,
    )
    footer = {"record": "summary", "avg": res.avg, "eval_entropy": res.eval_entropy, "mean_resp_len": res.mean_resp_len}
    _write_lines(out, [header] + res.records() + [footer])
    print(f"avg@{ecfg.k} = {res.avg:.4f}  (T={ecfg.temperature}, top_p={ecfg.top_p}, {ecfg.task_count} tasks; "
          f"eval entropy {res.eval_entropy:.4f} nats)")
    if args.temps:
        temps = [float(t) for t in args.temps.split(",") if t.strip()]
        rows = temperature_sweep(ck.params, temps, ecfg, vocab, rc.max_resp_len)
        sweep_out = out.with_name(out.name.replace(".eval.jsonl", "") + ".sweep.jsonl") if out.name.endswith(".eval.jsonl") else out.with_suffix(".sweep.jsonl")
        sweep_header = header_record("sweep", rc, checkpoint_digest=ck.state_digest(), k=ecfg.k, top_p=ecfg.top_p, temps=temps)
        _write_lines(
            sweep_out,
            [sweep_header]
            + [{"temperature": r.temperature, "k": ecfg.k, "top_p": ecfg.top_p, "avg": r.avg, "mean_entropy": r.mean_entropy} for r in rows],
        )
        for r in rows:
            print(f"  T={r.temperature:<5g} avg@{ecfg.k}={r.avg:.4f}  entropy={r.mean_entropy:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    sizes = tuple(int(x) for x in args.sizes.split(","))
    if len(sizes) != 4:
        raise ConfigError("--sizes expects V,d,C,h")
    report = gradcheck.run(args.seed, sizes, args.configs, corrupt=args.corrupt)
    for block, err in report.max_rel_error.items():
        flag = "ok" if err <= gradcheck.TOLERANCE else "FAIL"
        print(f"{block:<3} max_rel_error={err:.3e} {flag}")
    print(f"{report.configs} configs, tolerance {gradcheck.TOLERANCE:g}: {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def cmd_inspect(args) -> int:
    rc = resolve_config(args.config, args.set) if args.config or args.set else None
    ck, rc = _load_checkpoint(args.checkpoint, rc)
    vocab = rc.vocab()
    cfg = BranchConfig(
        n1=args.n1 if args.n1 is not None else rc.initial_rollouts,
        n2=args.n2 if args.n2 is not None else rc.reprompt_rollouts,
        top_k=args.top_k if args.top_k is not None else rc.topk_entropy,
    )
    task = generate_task((args.task_seed, seeding.TASKS, 0), rc.difficulty, vocab)
    group = build_group(ck.params, task, cfg, rc.sampler(), rc.reward(), (args.task_seed, seeding.GROUPS, 0), vocab)
    records = inspect_branch(group, vocab)
    header = header_record("inspect", rc, checkpoint_digest=ck.state_digest(), task=task_record(task), n1=cfg.n1, n2=cfg.n2, top_k=cfg.top_k)
    if args.out:
        _write_lines(Path(args.out), [header] + records)
    else:
        for rec in [header] + records:
            print(dump_record(rec))
    # glyph view goes to stderr so stdout stays line-delimited JSON
    print(f"query {vocab.render(task.prompt)}  answer {task.answer}", file=sys.stderr)
    for rec in records:
        mark = "+" if rec["verified"] else "-"
        where = f"t*={rec['t_star']}" if rec["t_star"] is not None else ""
        print(f" {rec['traj']:>2} {rec['origin']['kind']:<7} {mark} [{rec['prefix_glyphs']}] {rec['response_glyphs']} {where}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curelab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", "-c", default=None, required=config_required, help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    g = sub.add_parser("gen-data", help="dump task instances and the vocabulary")
    common(g)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--difficulty", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run a training schedule")
    common(t)
    t.add_argument("--mode", required=True, choices=[m.value for m in Mode])
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="avg@k and an optional temperature sweep")
    e.add_argument("checkpoint")
    common(e)
    e.add_argument("--k", type=int)
    e.add_argument("--temperature", type=float)
    e.add_argument("--top-p", type=float)
    e.add_argument("--tasks", type=int)
    e.add_argument("--eval-seed", type=int)
    e.add_argument("--temps", help="comma-separated temperatures for the sweep")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the objective gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--sizes", default="12,8,6,16", help="V,d,C,h")
    c.add_argument("--configs", type=int, default=20)
    c.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    c.set_defaults(fn=cmd_gradcheck)

    i = sub.add_parser("inspect", help="build one group and dump its entropy profile and forks")
    i.add_argument("checkpoint")
    common(i)
    i.add_argument("--task-seed", type=int, default=0)
    i.add_argument("--n1", type=int)
    i.add_argument("--n2", type=int)
    i.add_argument("--top-k", type=int)
    i.add_argument("--out")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ckpt_io.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
