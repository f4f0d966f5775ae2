"""Run-directory orchestration: pretrain -> gen-pairs -> label -> train -> evaluate -> report.

A run directory holds every artifact of one experiment:

    config.ini                   effective (fully defaulted) config
    base.ckpt                    pretrained denoiser
    pretrain_metrics.csv
    pairs.pref                   unlabeled pairs sampled from the base model
    labeled-<labeling>.pref      one per labeling rule in use
    models/<model>.ckpt
    metrics/<model>.csv          per-step training metrics
    eval/best-<model>.csv        best-of-N score tables
    eval/winrates.csv            every comparison, one row per metric
    eval/ablation.csv            refresh x multi-metric table, when available
    report/...                   rendered tables and gnuplot data files

Stages skip work whose outputs already exist unless ``force`` is set.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregate import label_dataset
from .config import ExperimentConfig
from .diffusion import init_params, load_checkpoint, pretrain, save_checkpoint
from .evalkit import BestScores, WinRateReport, best_scores, report, win_rate, _pct
from .pipeline import ModeSpec, gen_pairs
from .prefcore import ValidationError, atomic_write_text, read_dataset, seeded_rng, write_dataset
from .trainer import train

log = logging.getLogger(__name__)

STAGES = ("pretrain", "gen-pairs", "label", "train", "evaluate", "report")
BASE = "base"


class PrerequisiteError(OSError):
    """An artifact produced by an earlier stage is missing."""


@dataclass
class Run:
    cfg: ExperimentConfig
    root: Path
    force: bool = False

    def __post_init__(self):
        self.root = Path(self.root)
        self.rng = seeded_rng(self.cfg.seed)

    # paths ---------------------------------------------------------------
    @property
    def base_ckpt(self) -> Path:
        return self.root / "base.ckpt"

    @property
    def pairs(self) -> Path:
        return self.root / "pairs.pref"

    def labeled(self, spec: ModeSpec) -> Path:
        name = spec.mode if spec.metric is None else f"{spec.mode}-{spec.metric}"
        return self.root / f"labeled-{name}.pref"

    def model_ckpt(self, spec: ModeSpec) -> Path:
        return self.root / "models" / f"{spec.name}.ckpt"

    def metrics(self, spec: ModeSpec) -> Path:
        return self.root / "metrics" / f"{spec.name}.csv"

    def best(self, name: str) -> Path:
        return self.root / "eval" / f"best-{name}.csv"

    @property
    def winrates(self) -> Path:
        return self.root / "eval" / "winrates.csv"

    @property
    def ablation(self) -> Path:
        return self.root / "eval" / "ablation.csv"

    # helpers -------------------------------------------------------------
    def comment(self) -> str:
        return f"config={self.cfg.hash} seed={self.cfg.seed}"

    def _fresh(self, *paths: Path) -> bool:
        return not self.force and all(p.exists() for p in paths)

    @staticmethod
    def _require(path: Path, stage: str) -> None:
        if not path.exists():
            raise PrerequisiteError(f"missing {path.name}: run the {stage!r} stage first")

    def write_config(self) -> None:
        path = self.root / "config.ini"
        if path.exists() and not self.force and path.read_text(encoding="utf-8") != self.cfg.text:
            raise ValidationError(f"{self.root} holds a run with a different config; "
                                  "use --force or a fresh --out-dir")
        self.root.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.root / "config.ini", self.cfg.text)

    # stages --------------------------------------------------------------
    def stage_pretrain(self) -> None:
        if self._fresh(self.base_ckpt):
            return
        cfg = self.cfg
        rng = self.rng.split("pretrain")
        init = init_params(cfg.arch, rng.split("init"), cfg.init_out_scale)
        params, losses = pretrain(init, cfg.data, cfg.schedule, cfg.pretrain, rng.split("loop"))
        lines = [f"# {self.comment()}", "step,loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(losses)]
        atomic_write_text(self.root / "pretrain_metrics.csv", "\n".join(lines) + "\n")
        save_checkpoint(params, self.base_ckpt, cfg.header())
        log.info("pretrained base model (%d steps)", cfg.pretrain.steps)

    def stage_gen_pairs(self) -> None:
        if self._fresh(self.pairs):
            return
        self._require(self.base_ckpt, "pretrain")
        cfg = self.cfg
        base = load_checkpoint(self.base_ckpt)
        pairs = gen_pairs(base, cfg.schedule, cfg.registry, cfg.arch.C, cfg.pairs_per_condition,
                          self.rng.split("gen-pairs"))
        write_dataset(pairs, self.pairs, d=cfg.arch.d, metric_ids=cfg.registry.metric_ids, extra=cfg.header())
        log.info("generated %d pairs", len(pairs))

    def stage_label(self, modes: Sequence[ModeSpec]) -> None:
        self._require(self.pairs, "gen-pairs")
        pairs = None
        for spec in modes:
            out = self.labeled(spec)
            if self._fresh(out):
                continue
            if pairs is None:
                pairs = read_dataset(self.pairs)
            labeled, skipped = label_dataset(pairs, spec.policy(self.cfg.aggregation), self.rng.split("aggregate"))
            write_dataset(labeled, out, d=self.cfg.arch.d, metric_ids=self.cfg.registry.metric_ids,
                          extra=self.cfg.header())
            log.info("labeled %s: %d pairs kept, %d skipped", out.name, len(labeled), skipped)

    def stage_train(self, modes: Sequence[ModeSpec]) -> None:
        self._require(self.base_ckpt, "pretrain")
        for spec in modes:
            self._require(self.labeled(spec), "label")
        base = None
        for spec in modes:
            if self._fresh(self.model_ckpt(spec), self.metrics(spec)):
                continue
            if base is None:
                base = load_checkpoint(self.base_ckpt)
            data = read_dataset(self.labeled(spec))
            params, record = train(data, base, self.cfg.schedule, self.cfg.train_config(spec),
                                   self.rng.split("train"))
            (self.root / "models").mkdir(exist_ok=True)
            (self.root / "metrics").mkdir(exist_ok=True)
            save_checkpoint(params, self.model_ckpt(spec), self.cfg.header())
            record.checkpoint = str(self.model_ckpt(spec))
            record.write_csv(self.metrics(spec), self.comment())
            log.info("trained %s: final loss %.4f", spec.name, record.rows[-1].loss if record.rows else float("nan"))

    def stage_evaluate(self, modes: Sequence[ModeSpec]) -> list[WinRateReport]:
        self._require(self.base_ckpt, "pretrain")
        for spec in modes:
            self._require(self.model_ckpt(spec), "train")
        names = [BASE] + [spec.name for spec in modes]
        ckpts = [self.base_ckpt] + [self.model_ckpt(spec) for spec in modes]
        (self.root / "eval").mkdir(exist_ok=True)
        tables: dict[str, BestScores] = {}
        for name, ckpt in zip(names, ckpts):
            path = self.best(name)
            if self._fresh(path):
                tables[name] = read_best(path)
                continue
            tables[name] = best_scores(load_checkpoint(ckpt), self.cfg.schedule, self.cfg.eval,
                                       self.rng.split("evaluate"), name)
            write_best(tables[name], path, self.comment())
        reports = comparisons(tables, [spec.name for spec in modes], self.cfg.eval.tie_value)
        atomic_write_text(self.winrates, winrates_csv(reports, self.comment()))
        table = ablation_table(modes, {r.model_a: r for r in reports if r.model_b == BASE})
        if table is not None:
            atomic_write_text(self.ablation, table_csv(table, self.comment()))
        return reports

    def stage_report(self) -> list[str]:
        self._require(self.winrates, "evaluate")
        reports = read_winrates(self.winrates)
        out_dir = self.root / "report"
        out_dir.mkdir(exist_ok=True)
        written = report(reports, out_dir / "winrates.csv", self.comment())
        if self.ablation.exists():
            text = f"# {self.comment()}\n" + render_ablation(self.ablation)
            atomic_write_text(out_dir / "ablation.txt", text)
            written.append(str(out_dir / "ablation.txt"))
        return written


def run_pipeline(cfg: ExperimentConfig, root, stages: Sequence[str] = STAGES,
                 modes: Sequence[ModeSpec] | None = None, force: bool = False) -> Run:
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValidationError(f"unknown stage(s) {unknown}; expected a subset of {STAGES}")
    modes = tuple(modes) if modes is not None else cfg.modes
    run = Run(cfg, root, force)
    run.write_config()
    for stage in STAGES:
        if stage not in stages:
            continue
        log.info("stage %s", stage)
        if stage == "pretrain":
            run.stage_pretrain()
        elif stage == "gen-pairs":
            run.stage_gen_pairs()
        elif stage == "label":
            run.stage_label(modes)
        elif stage == "train":
            run.stage_train(modes)
        elif stage == "evaluate":
            run.stage_evaluate(modes)
        elif stage == "report":
            run.stage_report()
    return run


# --------------------------------------------------------------------------
# comparison bookkeeping
# --------------------------------------------------------------------------


def comparisons(tables: dict[str, BestScores], models: Sequence[str], tie_value: float) -> list[WinRateReport]:
    """Each model against the base, then every pair of models in the given order."""
    out = [win_rate(tables[m], tables[BASE], tie_value, m, BASE) for m in models]
    for a, b in itertools.combinations(models, 2):
        out.append(win_rate(tables[a], tables[b], tie_value, a, b))
    return out


def ablation_table(modes: Sequence[ModeSpec], vs_base: dict[str, WinRateReport]):
    """Refresh x multi-metric cells (each against base), if the run trained all four."""
    by = {(s.mode, s.refresh): s for s in modes if s.mode in ("balanced", "single")}
    cells = [(True, True), (True, False), (False, True), (False, False)]
    picked = []
    for multi, refresh in cells:
        spec = by.get(("balanced" if multi else "single", refresh))
        if spec is None or spec.name not in vs_base:
            return None
        picked.append((refresh, multi, vs_base[spec.name]))
    return picked


def table_csv(table, comment: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p_ref_update", "multi_metric", "model", "metric", "win_rate_percent"])
    for refresh, multi, r in table:
        for m, rate in zip(r.metric_ids, r.win_rates):
            w.writerow([int(refresh), int(multi), r.model_a, m, _pct(rate)])
    return buf.getvalue()


def render_ablation(path) -> str:
    rows = [r for r in _read_csv_rows(path)]
    metrics = list(dict.fromkeys(r["metric"] for r in rows))
    cells = {}
    for r in rows:
        cells.setdefault((r["p_ref_update"], r["multi_metric"], r["model"]), {})[r["metric"]] = r["win_rate_percent"]
    mark = {"1": "yes", "0": "no"}
    header = ["p_ref update", "multi-metric", "model", *metrics]
    body = [[mark[k[0]], mark[k[1]], k[2], *(v[m] for m in metrics)] for k, v in cells.items()]
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    return "\n".join("  ".join(str(c).rjust(w) for c, w in zip(row, widths)) for row in [header] + body) + "\n"


# --------------------------------------------------------------------------
# small CSV readers/writers
# --------------------------------------------------------------------------


def _read_csv_rows(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def write_best(b: BestScores, path, comment: str) -> None:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["prompt", "condition", *b.metric_ids])
    for i, (c, row) in enumerate(zip(b.conditions, b.table)):
        w.writerow([i, c, *map(repr, row.tolist())])
    atomic_write_text(path, buf.getvalue())


def read_best(path) -> BestScores:
    rows = _read_csv_rows(path)
    if not rows:
        raise ValidationError(f"{path}: empty best-score table")
    metric_ids = tuple(k for k in rows[0] if k not in ("prompt", "condition"))
    table = np.array([[float(r[m]) for m in metric_ids] for r in rows])
    return BestScores(tuple(int(r["condition"]) for r in rows), metric_ids, table)


def winrates_csv(reports: Sequence[WinRateReport], comment: str) -> str:
    """Full-precision companion of the rendered report; read back by ``report``."""
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model_a", "model_b", "metric", "win_rate", "ties", "n"])
    for r in reports:
        for m, rate, tie in zip(r.metric_ids, r.win_rates, r.ties):
            w.writerow([r.model_a, r.model_b, m, repr(rate), tie, r.n_conditions])
    return buf.getvalue()


def read_winrates(path) -> list[WinRateReport]:
    grouped: dict[tuple[str, str], list[dict]] = {}
    for r in _read_csv_rows(path):
        grouped.setdefault((r["model_a"], r["model_b"]), []).append(r)
    return [
        WinRateReport(a, b, tuple(r["metric"] for r in rows), tuple(float(r["win_rate"]) for r in rows),
                      tuple(int(r["ties"]) for r in rows), int(rows[0]["n"]))
        for (a, b), rows in grouped.items()
    ]


def tree_digest(root) -> dict[str, bytes]:
    """Relative path -> file bytes for every file under ``root`` (used to compare runs)."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def final_loss(metrics_csv, window: int = 100) -> float:
    """Mean logged loss over the last ``window`` steps of a training run."""
    rows = _read_csv_rows(metrics_csv)
    losses = [float(r["loss"]) for r in rows[-window:]]
    return float(np.mean(losses))


__all__ = ["Run", "run_pipeline", "STAGES", "PrerequisiteError", "tree_digest", "final_loss"]
