"""Experiment plans, the normalization comparison runner and its reports."""
from __future__ import annotations

import configparser
import csv
import io
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datapipe import SynthSpec, Volume, generate_dataset, load_manifest_volumes
from .net import UNet, UNetSpec
from .normlayers import NormMethod
from .trainer import TrainConfig, evaluate, save_checkpoint, train

__all__ = ["ExperimentPlan", "SeedRun", "RunReport", "PAPER_GRID", "load_plan",
           "parse_plan", "run_plan", "emit_report", "REPORT_COLUMNS"]

log = logging.getLogger(__name__)

PAPER_GRID = ("none", "batch", "group:2", "group:4", "group:8", "group:16", "group:32", "instance")
REPORT_COLUMNS = ("method", "groups", "epoch_seconds", "predict_seconds",
                  "dice_median", "dice_per_seed", "diverged")
SKIPPED = "skipped: incompatible G"


@dataclass
class ExperimentPlan:
    methods: list[NormMethod] = field(default_factory=lambda: [NormMethod.parse(m) for m in PAPER_GRID])
    net: UNetSpec = field(default_factory=UNetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthSpec = field(default_factory=lambda: SynthSpec(seed=1))
    train_count: int = 20
    eval_count: int = 5
    eval_seed: int = 2
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    precision: str = "single"
    manifest: Path | None = None

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def datasets(self) -> tuple[list[Volume], list[Volume]]:
        if self.manifest is not None:
            vols = load_manifest_volumes(self.manifest)
            if len(vols) < self.train_count + self.eval_count:
                raise ValueError(f"manifest lists {len(vols)} volumes, plan needs "
                                 f"{self.train_count + self.eval_count}")
            return (vols[:self.train_count],
                    vols[self.train_count:self.train_count + self.eval_count])
        return (generate_dataset(self.data, self.train_count),
                generate_dataset(replace(self.data, seed=self.eval_seed), self.eval_count))


@dataclass
class SeedRun:
    seed: int
    epoch_seconds: float | None = None
    predict_seconds: float | None = None
    dice: float | None = None
    diverged: bool = False
    losses: list[float] = field(default_factory=list)
    error: str | None = None


@dataclass
class RunReport:
    method: NormMethod
    runs: list[SeedRun] = field(default_factory=list)
    status: str = "ok"

    @property
    def groups(self) -> int | None:
        return self.method.groups if self.method.kind == "group" else None

    @property
    def diverged(self) -> bool:
        return any(r.diverged for r in self.runs)

    @property
    def dice_per_seed(self) -> list[float | None]:
        return [r.dice for r in self.runs]

    @property
    def dice_median(self) -> float | None:
        vals = [d for d in self.dice_per_seed if d is not None]
        return statistics.median(vals) if vals else None

    def _mean(self, attr) -> float | None:
        vals = [getattr(r, attr) for r in self.runs if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def epoch_seconds(self) -> float | None:
        return self._mean("epoch_seconds")

    @property
    def predict_seconds(self) -> float | None:
        return self._mean("predict_seconds")


# plan files ----------------------------------------------------------------

def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def parse_plan(text: str, base_dir: Path | None = None) -> ExperimentPlan:
    """Parse an INI-style plan (sections ``plan``, ``net``, ``train``, ``data``)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    plan = ExperimentPlan()
    if cp.has_section("plan"):
        sec = cp["plan"]
        if "methods" in sec:
            plan.methods = [NormMethod.parse(m) for m in sec["methods"].split(",") if m.strip()]
        if "seeds" in sec:
            plan.seeds = _ints(sec["seeds"])
        plan.precision = sec.get("precision", plan.precision)
        if plan.precision not in ("single", "double"):
            raise ValueError(f"precision must be single or double, got {plan.precision!r}")
    norm_kw = {}
    if cp.has_section("norm"):
        sec = cp["norm"]
        if "epsilon" in sec:
            norm_kw["epsilon"] = sec.getfloat("epsilon")
        if "momentum" in sec:
            norm_kw["momentum"] = sec.getfloat("momentum")
    if norm_kw:
        plan.methods = [replace(m, **norm_kw) for m in plan.methods]
    if cp.has_section("net"):
        sec = cp["net"]
        kw = {k: sec.getint(k) for k in ("levels", "base_filters", "kernel", "dilation", "up_kernel")
              if k in sec}
        plan.net = UNetSpec(**kw)
    if cp.has_section("train"):
        sec = cp["train"]
        kw = {}
        for k in ("epochs", "seed"):
            if k in sec:
                kw[k] = sec.getint(k)
        for k in ("learning_rate", "beta1", "beta2", "eps", "momentum", "divergence_threshold"):
            if k in sec:
                kw[k] = sec.getfloat(k)
        if "optimizer" in sec:
            kw["optimizer"] = sec["optimizer"].strip()
        plan.train = TrainConfig(**kw)
    if cp.has_section("data"):
        sec = cp["data"]
        for k in ("train_count", "eval_count", "eval_seed"):
            if k in sec:
                setattr(plan, k, sec.getint(k))
        kinds = {k: type(v) for k, v in SynthSpec().__dict__.items()}
        kw = {k: kinds[k](sec[k]) for k in kinds if k in sec}
        plan.data = replace(plan.data, **kw)
        if "manifest" in sec:
            m = Path(sec["manifest"])
            plan.manifest = m if m.is_absolute() or base_dir is None else base_dir / m
    return plan


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    return parse_plan(path.read_text(), path.parent)


# running -------------------------------------------------------------------

def _run_one(plan: ExperimentPlan, method: NormMethod, seed: int, train_set, eval_set,
             checkpoint_dir: Path | None) -> SeedRun:
    run = SeedRun(seed)
    try:
        net = UNet(replace(plan.net, norm=method), seed=seed, dtype=plan.dtype)
        _, records = train(net, train_set, replace(plan.train, seed=seed))
        run.losses = [r.loss for r in records]
        run.epoch_seconds = float(np.mean([r.seconds for r in records])) if records else 0.0
        run.diverged = any(r.diverged for r in records)
        if not run.diverged:
            run.dice, run.predict_seconds = evaluate(net, eval_set)
            if checkpoint_dir is not None:
                checkpoint_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(net, checkpoint_dir / f"{method.token.replace(':', '')}_seed{seed}.ckpt")
    except Exception as exc:  # one failed run must not sink the plan
        log.exception("run %s seed %d failed", method.token, seed)
        run.error = f"{type(exc).__name__}: {exc}"
    return run


def run_plan(plan: ExperimentPlan, parallel: bool = False, workers: int = 4,
             checkpoint_dir=None,
             progress: Callable[[str], None] | None = None) -> list[RunReport]:
    """Train and evaluate every (method, seed) pair; one report per method.

    Each run owns its network, optimizer state and clock. Dataset
    generation happens once, before any timed phase.
    """
    train_set, eval_set = plan.datasets()
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    reports = []
    jobs = []
    for method in plan.methods:
        rep = RunReport(method)
        reports.append(rep)
        if not all(method.compatible(c) for c in plan.net.norm_channels()):
            rep.status = SKIPPED
            continue
        for seed in plan.seeds:
            jobs.append((rep, method, seed))

    def work(job):
        rep, method, seed = job
        run = _run_one(plan, method, seed, train_set, eval_set, ckpt)
        if progress:
            dice = "div." if run.diverged else (f"{run.dice:.4f}" if run.dice is not None else run.error)
            progress(f"{method.label} seed {seed}: dice {dice}, {run.epoch_seconds or 0:.2f} s/epoch")
        return run

    if parallel:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    for (rep, _, _), run in zip(jobs, results):
        rep.runs.append(run)
    for rep in reports:
        if rep.status == "ok" and rep.runs and all(r.error for r in rep.runs):
            rep.status = "failed: " + rep.runs[0].error
    return reports


# reports -------------------------------------------------------------------

def _num(v, digits=3) -> str:
    return "" if v is None else f"{v:.{digits}f}"


def _row(rep: RunReport) -> list[str]:
    groups = "" if rep.groups is None else str(rep.groups)
    if rep.status != "ok":
        return [rep.method.label, groups, "", "", rep.status, "", ""]
    median = rep.dice_median
    per_seed = ";".join("div." if r.diverged else ("fail" if r.error else f"{r.dice:.4f}")
                        for r in rep.runs)
    return [
        rep.method.label, groups, _num(rep.epoch_seconds), _num(rep.predict_seconds),
        "div." if median is None and rep.diverged else _num(median, 4),
        per_seed, "yes" if rep.diverged else "no",
    ]


def emit_report(reports: Sequence[RunReport], fmt: str = "csv") -> str:
    if not reports:
        raise ValueError("no reports to emit")
    rows = [_row(r) for r in reports]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    out = ["## Timing", "",
           "| Method | Groups | Time per epoch [s] | Prediction time [s] |",
           "|---|---|---|---|"]
    for r in rows:
        out.append(f"| {r[0]} | {r[1] or '-'} | {r[2] or '-'} | {r[3] or '-'} |")
    out += ["", "## Accuracy", "",
            "| Method | Groups | Dice (median) | Dice per seed | Diverged |",
            "|---|---|---|---|---|"]
    for r in rows:
        out.append(f"| {r[0]} | {r[1] or '-'} | {r[4] or '-'} | {r[5] or '-'} | {r[6] or '-'} |")
    return "\n".join(out) + "\n"
