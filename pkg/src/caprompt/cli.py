"""Command-line runner: generate, train, eval, sweep, probe, geometry, ablate.

Exit status: 0 success, 2 configuration error, 3 runtime error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import experiment as exp
from .config import ExperimentConfig, _parse, config_fields, load_config
from .data import generate_stream, save_stream
from .errors import ArchiveError, ArgumentError, StateError
from .evaluation import compute_metrics, concavity_probe, evaluate_stream, jensen_harness
from .prompts import collinearity_report

ARCHIVE_ENV = "CAPROMPT_ARCHIVE_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


def archive_root() -> Path | None:
    root = os.environ.get(ARCHIVE_ENV)
    return Path(root) if root else None


def resolve(path: str | None, default_name: str | None = None) -> Path:
    """Relative paths live under the archive root when the variable is set."""
    root = archive_root()
    if path is None:
        if default_name is None:
            raise ArgumentError("no path given")
        path = default_name
    p = Path(path)
    if root is not None and not p.is_absolute():
        return root / p
    return p


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("experiment settings (override the config file)")
    group.add_argument("--config", help="key-value config file to start from")
    for f in config_fields():
        if f.name == "seed":
            continue
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="V",
                           help=f"default: {_show(f.default)}")


def _show(v) -> str:
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return "all" if v is None else str(v)


def build_config(args) -> ExperimentConfig:
    base = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    defaults = ExperimentConfig()
    changes = {}
    for f in config_fields():
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            changes[f.name] = _parse(f.name, raw, getattr(defaults, f.name))
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return base.replace(**changes)


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _int_list(raw: str) -> list[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ArgumentError(f"expected comma-separated integers, got {raw!r}") from exc


def _float_list(raw: str) -> list[float]:
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ArgumentError(f"expected comma-separated numbers, got {raw!r}") from exc


def cmd_generate(args) -> int:
    cfg = build_config(args)
    out = resolve(args.out, f"stream-seed{cfg.seed}.npz")
    stream = generate_stream(cfg.stream_spec())
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_stream(out, stream)
    except OSError as exc:
        raise ArchiveError(out, exc.strerror or str(exc)) from exc
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = resolve(args.out, f"run-seed{cfg.seed}")
    cycles = None if args.cycles is None else _int_list(args.cycles)
    res = exp.run_experiment(cfg, out, cycles=cycles, figures=not args.no_figures,
                             log=None if args.quiet else _say)
    s = res.summary
    af = "n/a" if s["af"] is None else f"{s['af']:.4f}"
    print(f"ACC {s['acc']:.4f}  AF {af}  archive {out}")
    return EXIT_OK


def _load(archive_arg: str):
    archive = resolve(archive_arg)
    cfg = exp.load_archive_config(archive)
    state = exp.load_state(archive)
    stream = generate_stream(cfg.stream_spec())
    return archive, cfg, state, stream


def cmd_eval(args) -> int:
    archive, cfg, state, stream = _load(args.archive)
    num = cfg.num if args.num is None else args.num
    mode = cfg.mode if args.mode is None else args.mode
    row, _ = evaluate_stream(state, stream.tasks[:state.tasks_trained], num, mode)
    out = {"num": num, "mode": mode, "final_row": [float(v) for v in row],
           "final_acc": float(sum(row) / len(row))}
    if args.recompute:
        out["recomputed"] = {str(n): {"acc": a, "af": f}
                             for n, (a, f) in exp.recompute_metrics(archive).items()}
        out["summary"] = {k: exp.read_summary(archive)[k] for k in ("acc", "af")}
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_probe(args) -> int:
    archive, cfg, state, stream = _load(args.archive)
    tasks = stream.tasks[:state.tasks_trained]
    x = np.concatenate([t.test_x for t in tasks])
    y = np.concatenate([t.test_y for t in tasks])
    if args.samples is not None:
        x, y = x[:args.samples], y[:args.samples]
    rep = jensen_harness(state, x, y, args.mode or cfg.jensen_mode)
    conc = concavity_probe(state, x, y, cfg.mode)
    out = {"jensen": rep.summary(),
           "concavity": {k: conc[k] for k in ("mean", "max", "nonpos_fraction")}}
    text = json.dumps(exp._clean(out), indent=2, sort_keys=True)
    path = archive / "probe.json"
    try:
        path.write_text(text + "\n")
    except OSError as exc:
        raise ArchiveError(path, exc.strerror or str(exc)) from exc
    print(text)
    return EXIT_OK


def cmd_geometry(args) -> int:
    archive = resolve(args.archive)
    state = exp.load_state(archive)
    rep = collinearity_report(state.prompts)
    print(f"collinearity mean {rep['mean']:.4f}  min {rep['min']:.4f}  "
          f"pairs {len(rep['pairs'])}")
    for i, j, c in rep["pairs"]:
        print(f"  tasks {i},{j}: {c:+.4f}")
    if not args.no_figures:
        from .plotting import render_archive
        render_archive(archive)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    values = _int_list(args.values) if args.axis == "num" else _float_list(args.values)
    out = resolve(args.out, f"sweep-{args.axis}-seed{cfg.seed}")
    rows = exp.sweep(cfg, args.axis, values, out, figures=not args.no_figures,
                     log=None if args.quiet else _say)
    for r in rows:
        af = "n/a" if r["af"] is None else f"{r['af']:.4f}"
        print(f"{args.axis}={r['value']}  ACC {r['acc']:.4f}  AF {af}  {r['trend']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    names = [n.strip() for n in args.names.split(",") if n.strip()]
    out = resolve(args.out, f"ablate-seed{cfg.seed}")
    rows = exp.ablate(cfg, names, out, figures=not args.no_figures,
                      log=None if args.quiet else _say)
    for r in rows:
        print(f"{r['ablation']:<16} ACC {r['acc']:.4f}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caprompt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic stream to disk")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out")
    _add_config_flags(g)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="run one experiment and write its archive")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", help=f"archive directory (relative to ${ARCHIVE_ENV} if set)")
    t.add_argument("--cycles", help="comma-separated inference cycle counts to report")
    t.add_argument("--no-figures", action="store_true")
    t.add_argument("--quiet", action="store_true")
    _add_config_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate an archived run")
    e.add_argument("archive")
    e.add_argument("--num", type=int)
    e.add_argument("--mode", choices=["cyclic", "query", "select"])
    e.add_argument("--recompute", action="store_true",
                   help="also rebuild ACC/AF from the archived prediction log")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="ACC/AF over values of num, alpha or beta")
    s.add_argument("--axis", required=True, choices=list(exp.SWEEP_AXES))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out")
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--quiet", action="store_true")
    _add_config_flags(s)
    s.set_defaults(fn=cmd_sweep)

    pr = sub.add_parser("probe", help="aggregation error harness and concavity probe")
    pr.add_argument("archive")
    pr.add_argument("--mode", choices=["cyclic", "query", "select"])
    pr.add_argument("--samples", type=int)
    pr.set_defaults(fn=cmd_probe)

    ge = sub.add_parser("geometry", help="prompt collinearity report")
    ge.add_argument("archive")
    ge.add_argument("--no-figures", action="store_true")
    ge.set_defaults(fn=cmd_geometry)

    ab = sub.add_parser("ablate", help="paired ablation runs on one seed")
    ab.add_argument("--names", default="default,no_aggregation,query_weighting,no_concave,no_linear",
                    help=f"comma-separated from {','.join(exp.ABLATIONS)}")
    ab.add_argument("--seed", type=int, default=None)
    ab.add_argument("--out")
    ab.add_argument("--no-figures", action="store_true")
    ab.add_argument("--quiet", action="store_true")
    _add_config_flags(ab)
    ab.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ArgumentError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArchiveError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (StateError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
