"""End-to-end runs, their on-disk archives, and parameter sweeps."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node
from .backbone import Backbone, load_backbone, pretrain_backbone, save_backbone
from .config import ExperimentConfig, load_config, save_config
from .data import TaskStream, generate_stream
from .errors import ArchiveError, ArgumentError
from .evaluation import (AF_DEFINITION, AccuracyMatrix, Prediction, compute_metrics,
                         concavity_probe, evaluate_stream, jensen_harness,
                         metrics_from_predictions)
from .head import ClassMap, TaskHead
from .prompts import collinearity_report, load_prompt, save_prompt
from .trainer import ClassFeatureStore, ExperimentState, train_task

SCHEMA_VERSION = 1
INCOMPLETE = "INCOMPLETE"
SWEEP_AXES = ("num", "alpha", "beta")

_BACKBONES: dict[str, tuple] = {}


def _backbone_key(cfg: ExperimentConfig) -> str:
    spec = cfg.stream_spec()
    return repr((vars(spec), cfg.backbone_config(), cfg.pretrain_epochs, cfg.pretrain_lr))


def prepare_backbone(cfg: ExperimentConfig, stream: TaskStream, cache: bool = True) -> Backbone:
    """Pre-train (or fetch from the in-process cache) the frozen backbone for ``cfg``."""
    key = _backbone_key(cfg)
    if cache and key in _BACKBONES:
        bcfg, arrays = _BACKBONES[key]
        bb = Backbone(bcfg, {k: Node(v.copy()) for k, v in arrays.items()})
        return bb.freeze()
    bb = pretrain_backbone(stream.base.train_x, stream.base.train_y, cfg.backbone_config(),
                           cfg.pretrain_epochs, cfg.seed, lr=cfg.pretrain_lr)
    if cache:
        _BACKBONES[key] = (bb.config, {k: v.value.copy() for k, v in bb.params.items()})
    return bb


def clear_backbone_cache() -> None:
    _BACKBONES.clear()


def eval_nums(cfg: ExperimentConfig, cycles: Sequence[int] | None = None) -> tuple[int, ...]:
    """Cycle counts evaluated in a run; only cyclic weighting depends on the count."""
    nums = {cfg.num}
    if cfg.mode == "cyclic":
        nums.update(cfg.eval_cycles if cycles is None else cycles)
    return tuple(sorted(nums))


@dataclass
class RunResult:
    config: ExperimentConfig
    state: ExperimentState
    stream: TaskStream
    matrices: dict[int, AccuracyMatrix]
    predictions: dict[int, list[Prediction]]
    concavity: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    out_dir: Path | None = None

    @property
    def acc(self) -> float:
        return self.summary["acc"]

    @property
    def af(self) -> float | None:
        return self.summary["af"]


def _clean(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.generic):
        return _clean(value.item())
    return value


def _micro(records: Sequence[Prediction], after: int) -> float:
    hits = [r.label == r.pred for r in records if r.after_task == after]
    return float(np.mean(hits))


def train_stream(cfg: ExperimentConfig, stream: TaskStream, backbone: Backbone,
                 cycles: Sequence[int] | None = None, log=None) -> RunResult:
    """Train every task in order, evaluating after each one."""
    state = ExperimentState.fresh(backbone)
    nums = eval_nums(cfg, cycles)
    matrices = {n: AccuracyMatrix() for n in nums}
    predictions: dict[int, list[Prediction]] = {n: [] for n in nums}
    concavity = []
    for i, task in enumerate(stream.tasks):
        train_task(state, i, task, cfg)
        seen = stream.tasks[:i + 1]
        for n in nums:
            row, records = evaluate_stream(state, seen, n, cfg.mode)
            matrices[n].add_row(row)
            predictions[n].extend(records)
        if i >= 1:
            probe = concavity_probe(state, task.test_x, task.test_y, cfg.mode)
            concavity.append({"task": i, "mean": probe["mean"], "max": probe["max"],
                              "nonpos_fraction": probe["nonpos_fraction"]})
        if log is not None:
            acc, _ = compute_metrics(matrices[cfg.num])
            log(f"task {i + 1}/{len(stream.tasks)}: running ACC {acc:.4f}")
    return RunResult(cfg, state, stream, matrices, predictions, concavity)


def _summarize(result: RunResult) -> dict:
    cfg, state = result.config, result.state
    last = result.state.tasks_trained - 1
    acc, af = compute_metrics(result.matrices[cfg.num])
    cycles = {}
    for n, m in result.matrices.items():
        a, f = compute_metrics(m)
        cycles[str(n)] = {"acc": a, "af": f, "micro_acc": _micro(result.predictions[n], last)}
    summary = {
        "schema_version": SCHEMA_VERSION,
        "tasks": state.tasks_trained,
        "acc": acc,
        "af": af,
        "micro_acc": _micro(result.predictions[cfg.num], last),
        "af_definition": AF_DEFINITION,
        "mode": cfg.mode,
        "num": cfg.num,
        "cycles": cycles,
        "backbone_fingerprint": state.backbone.fingerprint(),
    }
    if result.concavity:
        summary["delta_nonpos_fraction"] = float(np.mean([c["nonpos_fraction"]
                                                          for c in result.concavity]))
        summary["delta_mean"] = float(np.mean([c["mean"] for c in result.concavity]))
    if len(state.prompts) >= 3:
        rep = collinearity_report(state.prompts)
        summary["collinearity_mean"] = rep["mean"]
        summary["collinearity_min"] = rep["min"]
    return _clean(summary)


def _all_test(stream: TaskStream, upto: int):
    tasks = stream.tasks[:upto]
    return (np.concatenate([t.test_x for t in tasks]),
            np.concatenate([t.test_y for t in tasks]))


def run_experiment(cfg: ExperimentConfig, out_dir=None, *, cycles: Sequence[int] | None = None,
                   figures: bool = True, cache: bool = True, log=None) -> RunResult:
    """Pre-train, train the stream task by task, evaluate, and optionally archive.

    With ``out_dir`` the archive gets an ``INCOMPLETE`` marker that is only
    removed once every file has been written.
    """
    cfg.validate()
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        _guard(out, lambda: out.mkdir(parents=True, exist_ok=True))
        _guard(out / INCOMPLETE, lambda: (out / INCOMPLETE).write_text("run in progress\n"))
        _guard(out / "config.ini", lambda: save_config(out / "config.ini", cfg))
    stream = generate_stream(cfg.stream_spec())
    backbone = prepare_backbone(cfg, stream, cache=cache)
    result = train_stream(cfg, stream, backbone, cycles, log=log)
    result.summary = _summarize(result)
    if out is not None:
        result.out_dir = out
        write_archive(result, out, figures=figures)
    return result


def _guard(path, action):
    try:
        return action()
    except OSError as exc:
        raise ArchiveError(path, exc.strerror or str(exc)) from exc


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    def write():
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    _guard(path, write)


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def save_state(out: Path, state: ExperimentState) -> None:
    _guard(out / "backbone.npz", lambda: save_backbone(out / "backbone.npz", state.backbone))
    pdir = out / "prompts"
    _guard(pdir, lambda: pdir.mkdir(exist_ok=True))
    for ps in state.prompts:
        path = pdir / f"task_{ps.task_id:02d}.npz"
        _guard(path, lambda: save_prompt(path, ps))
    tasks = state.head.class_map.tasks
    sizes = np.array([len(c) for c in tasks], dtype=np.int64)
    flat = np.array([c for cls in tasks for c in cls], dtype=np.int64)

    def head():
        with open(out / "head.npz", "wb") as fh:
            np.savez(fh, format_version=np.int64(SCHEMA_VERSION), W=state.head.W.value,
                     task_sizes=sizes, classes=flat, tasks_trained=np.int64(state.tasks_trained))
    _guard(out / "head.npz", head)
    feats, labels = state.store.arrays()

    def store():
        with open(out / "features.npz", "wb") as fh:
            np.savez(fh, format_version=np.int64(SCHEMA_VERSION), features=feats, labels=labels)
    _guard(out / "features.npz", store)


def load_state(archive) -> ExperimentState:
    """Rebuild the trained state (backbone, prompts, head, feature store) of an archive."""
    out = Path(archive)
    if (out / INCOMPLETE).exists():
        raise ArchiveError(out, "archive is marked incomplete")
    try:
        backbone = load_backbone(out / "backbone.npz")
        with np.load(out / "head.npz") as data:
            if int(data["format_version"]) != SCHEMA_VERSION:
                raise ArgumentError("unsupported head checkpoint version")
            W = data["W"].copy()
            sizes, flat = data["task_sizes"], data["classes"]
            trained = int(data["tasks_trained"])
        with np.load(out / "features.npz") as data:
            feats, labels = data["features"], data["labels"]
            store = ClassFeatureStore({int(c): feats[k].copy() for k, c in enumerate(labels)})
        paths = sorted((out / "prompts").glob("task_*.npz"))
        prompts = [load_prompt(p) for p in paths]
    except OSError as exc:
        raise ArchiveError(getattr(exc, "filename", None) or out, str(exc)) from exc
    bounds = np.cumsum(np.concatenate([[0], sizes]))
    cmap = ClassMap([tuple(int(c) for c in flat[a:b]) for a, b in zip(bounds[:-1], bounds[1:])])
    head = TaskHead(ag.Node(W), cmap)
    return ExperimentState(backbone, head, prompts, store, trained)


def write_archive(result: RunResult, out: Path, figures: bool = True) -> None:
    out = Path(out)
    _guard(out, lambda: out.mkdir(parents=True, exist_ok=True))
    if not (out / INCOMPLETE).exists():
        _guard(out / INCOMPLETE, lambda: (out / INCOMPLETE).write_text("run in progress\n"))
    cfg, state = result.config, result.state
    _guard(out / "config.ini", lambda: save_config(out / "config.ini", cfg))
    save_state(out, state)

    T = state.tasks_trained
    A = result.matrices[cfg.num].to_array()
    _write_csv(out / "accuracy_matrix.csv", ["after_task"] + [f"task_{j}" for j in range(T)],
               [[i] + ["" if np.isnan(v) else repr(float(v)) for v in A[i]] for i in range(T)])
    _write_csv(out / "predictions.csv", ["num", "after_task", "task", "index", "label", "pred"],
               [[n, r.after_task, r.task, r.index, r.label, r.pred]
                for n in sorted(result.predictions) for r in result.predictions[n]])
    _write_csv(out / "loss_curve.csv", ["task", "step", "loss"],
               [[t, s, repr(v)] for t, s, v in state.loss_log])
    _write_csv(out / "cycle_sweep.csv", ["num", "acc", "af", "micro_acc"],
               [[n, _fmt(v["acc"]), _fmt(v["af"]), _fmt(v["micro_acc"])]
                for n, v in sorted(result.summary["cycles"].items(), key=lambda kv: int(kv[0]))])
    _write_csv(out / "concavity.csv", ["task", "mean", "max", "nonpos_fraction"],
               [[c["task"], _fmt(c["mean"]), _fmt(c["max"]), _fmt(c["nonpos_fraction"])]
                for c in result.concavity])

    summary = dict(result.summary)
    if T >= 2:
        x, y = _all_test(result.stream, T)
        rep = jensen_harness(state, x, y, cfg.jensen_mode)
        _write_csv(out / "jensen.csv",
                   ["sample", "label", "agg_prob", "mix_prob", "gap", "e1_term", "e2_term",
                    "delta", "implication_holds"],
                   [[k, int(y[k]), repr(float(rep.agg_prob[k])), repr(float(rep.mix_prob[k])),
                     repr(float(rep.gap[k])), repr(float(rep.e1_terms[k])),
                     repr(float(rep.e2_terms[k])), repr(float(rep.delta[k])),
                     int(rep.implication_holds()[k])] for k in range(len(y))])
        summary["jensen"] = _clean(rep.summary())
    if T >= 3:
        geo = collinearity_report(state.prompts)
        _write_csv(out / "collinearity.csv", ["task_i", "task_j", "cosine"],
                   [[i, j, repr(c)] for i, j, c in geo["pairs"]])
        _write_csv(out / "prompt_pca.csv", ["task", "pc1", "pc2"],
                   [[k + 1, repr(float(p[0])), repr(float(p[1]))]
                    for k, p in enumerate(geo["pca"])])
    result.summary = summary
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    _guard(out / "summary.json", lambda: (out / "summary.json").write_text(text))
    if figures:
        from . import plotting
        plotting.render_archive(out)
    _guard(out / INCOMPLETE, lambda: (out / INCOMPLETE).unlink())


def read_summary(archive) -> dict:
    path = Path(archive) / "summary.json"
    return json.loads(_guard(path, path.read_text))


def read_predictions(archive) -> dict[int, list[Prediction]]:
    """Raw prediction records of an archive, keyed by cycle count."""
    path = Path(archive) / "predictions.csv"
    out: dict[int, list[Prediction]] = {}

    def read():
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.setdefault(int(row["num"]), []).append(
                    Prediction(int(row["after_task"]), int(row["task"]), int(row["index"]),
                               int(row["label"]), int(row["pred"])))
    _guard(path, read)
    return out


def recompute_metrics(archive) -> dict[int, tuple[float, float | None]]:
    """ACC and AF per cycle count, rebuilt from the archived prediction log alone."""
    return {n: metrics_from_predictions(recs)[1] for n, recs in read_predictions(archive).items()}


def load_archive_config(archive) -> ExperimentConfig:
    path = Path(archive) / "config.ini"
    return _guard(path, lambda: load_config(path))


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, out_dir=None,
          figures: bool = True, log=None) -> list[dict]:
    """ACC and AF for each value of one hyper-parameter on a shared seed.

    The ``num`` axis varies the number of inference cycles of a single
    training run (training always uses the two-stage weights); ``alpha``
    and ``beta`` retrain per value.
    """
    if axis not in SWEEP_AXES:
        raise ArgumentError(f"axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ArgumentError("sweep needs at least one value")
    out = None if out_dir is None else Path(out_dir)
    rows = []
    if axis == "num":
        nums = [int(v) for v in values]
        if any(n < 1 for n in nums):
            raise ArgumentError("cycle counts must be positive")
        run_dir = None if out is None else out / "run"
        res = run_experiment(cfg, run_dir, cycles=nums, figures=figures, log=log)
        for n in nums:
            acc, af = compute_metrics(res.matrices[n if n in res.matrices else cfg.num])
            rows.append({"axis": axis, "value": n, "acc": acc, "af": af})
    else:
        for v in values:
            sub = cfg.replace(**{axis: float(v)})
            run_dir = None if out is None else out / f"{axis}_{v}"
            res = run_experiment(sub, run_dir, cycles=(), figures=figures, log=log)
            rows.append({"axis": axis, "value": float(v), "acc": res.acc, "af": res.af})
    _annotate(rows)
    if out is not None:
        _guard(out, lambda: out.mkdir(parents=True, exist_ok=True))
        _write_csv(out / "sweep.csv", ["axis", "value", "acc", "af", "trend"],
                   [[r["axis"], r["value"], _fmt(r["acc"]), _fmt(r["af"]), r["trend"]]
                    for r in rows])
        if figures:
            from . import plotting
            plotting.render_sweep(out / "sweep.csv", out / "sweep.png")
    return rows


def _annotate(rows: list[dict]) -> None:
    """Mark each row's ACC change against the previous value."""
    prev = None
    for r in rows:
        if prev is None:
            r["trend"] = "start"
        else:
            r["trend"] = "up" if r["acc"] > prev else ("down" if r["acc"] < prev else "flat")
        prev = r["acc"]


ABLATIONS = {
    "default": {},
    "no_aggregation": {"aggregation": False},
    "query_weighting": {"weighting": "query"},
    "no_concave": {"alpha": 0.0},
    "no_linear": {"beta": 0.0},
    "no_replay": {"replay": False},
    "prototype_head": {"prototype_head": True},
}


def ablate(cfg: ExperimentConfig, names: Sequence[str], out_dir=None, figures: bool = True,
           log=None) -> list[dict]:
    """Paired runs of the named ablations on the same seed."""
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise ArgumentError(f"unknown ablations {unknown}; choose from {sorted(ABLATIONS)}")
    out = None if out_dir is None else Path(out_dir)
    rows = []
    for name in names:
        sub = cfg.replace(**ABLATIONS[name])
        res = run_experiment(sub, None if out is None else out / name, cycles=(),
                             figures=figures, log=log)
        rows.append({"ablation": name, "acc": res.acc, "af": res.af,
                     "delta_nonpos_fraction": res.summary.get("delta_nonpos_fraction"),
                     "collinearity_mean": res.summary.get("collinearity_mean")})
    if out is not None:
        _guard(out, lambda: out.mkdir(parents=True, exist_ok=True))
        keys = ["ablation", "acc", "af", "delta_nonpos_fraction", "collinearity_mean"]
        _write_csv(out / "ablation.csv", keys, [[_fmt(r[k]) for k in keys] for r in rows])
    return rows
