"""mIoU evaluation, feature/prototype discrepancy tables and run reports.

CSV schemas written here:

``eval.csv``
    ``domain, miou, iou_0 .. iou_{C-1}`` (``nan`` marks classes absent from
    both prediction and ground truth; they are left out of the mean).
``discrepancy_l1.csv``
    ``dataset, class, present, l1_src, l1_aug``
``summary.csv``
    ``method, pcl, upcl, hpcl, runs, <one column per unseen domain>, mean``
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import numerics as nx
from .losses import _normalize_rows
from .protobank import IGNORE_INDEX, pool_class_features
from .segtrain import LOG_FIELDS, TrainState, predict, to_nchw
from .synthdomains import ConfigError, Dataset, read_dataset, read_meta_file

CLASS_NAMES = ("Road", "Sidewalk", "Building", "Vegetation", "Sky", "Car", "Sign", "Water", "Fence", "Pole")
TABLE4_ROWS = (
    ("Baseline", "baseline", False, False, False),
    ("PCL", "pcl", True, False, False),
    ("UPCL", "upcl", False, True, False),
    ("HPCL", "hpcl", False, False, True),
    ("CDPCL", "cdpcl", False, True, True),
)


def class_name(c: int) -> str:
    return CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}"


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    keep = gt != ignore_index
    idx = gt[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class ``TP / (TP + FP + FN)``; classes with an empty union are NaN and skipped."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = np.full(len(tp), np.nan)
    seen = union > 0
    per_class[seen] = tp[seen] / union[seen]
    mean = float(per_class[seen].mean()) if seen.any() else float("nan")
    return per_class, mean


def evaluate_state(state: TrainState, ds: Dataset) -> tuple[np.ndarray, float]:
    if len(ds) == 0:
        raise ConfigError(f"dataset {ds.path or ds.domain} is empty")
    C = state.net.num_classes
    if ds.num_classes != C:
        raise ConfigError(f"dataset has {ds.num_classes} classes, checkpoint has {C}")
    pred = predict(state.net, ds.images)
    return miou(confusion_matrix(pred, ds.labels, C))


def _load(checkpoint) -> TrainState:
    if isinstance(checkpoint, TrainState):
        return checkpoint
    return TrainState.from_tensors(ckpt.load(checkpoint))


@dataclass
class EvalTable:
    domains: list[str]
    per_class: dict[str, np.ndarray]
    mean: dict[str, float]

    @property
    def average(self) -> float:
        return float(np.mean([self.mean[d] for d in self.domains]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        C = len(next(iter(self.per_class.values())))
        w.writerow(["domain", "miou"] + [f"iou_{c}" for c in range(C)])
        for d in self.domains:
            w.writerow([d, f"{self.mean[d]:.6f}"] + [f"{v:.6f}" for v in self.per_class[d]])
        return buf.getvalue()


def evaluate(checkpoint, dataset_dirs: Sequence) -> EvalTable:
    """Argmax-prediction mIoU per domain. Nothing is written."""
    state = _load(checkpoint)
    datasets = [d if isinstance(d, Dataset) else read_dataset(d) for d in dataset_dirs]
    if not datasets:
        raise ConfigError("no datasets to evaluate")
    table = EvalTable([], {}, {})
    for ds in datasets:
        per_class, mean = evaluate_state(state, ds)
        table.domains.append(ds.domain)
        table.per_class[ds.domain] = per_class
        table.mean[ds.domain] = mean
    return table


# -- discrepancy analysis --------------------------------------------------------------
@dataclass
class DiscrepancyTables:
    dataset: str
    present: np.ndarray
    l1_src: np.ndarray
    l1_aug: np.ndarray
    cos_src: np.ndarray  # rows: prototypes, columns: class-wise features
    cos_aug: np.ndarray

    @staticmethod
    def _diag_gap(S: np.ndarray, ok: np.ndarray) -> float:
        idx = np.flatnonzero(ok)
        if idx.size < 2:
            return float("nan")
        sub = S[np.ix_(idx, idx)]
        off = ~np.eye(idx.size, dtype=bool)
        return float(np.diag(sub).mean() - sub[off].mean())

    def diagonal_gap(self, which: str = "aug") -> float:
        """Mean diagonal minus mean off-diagonal cosine over present classes."""
        return self._diag_gap(self.cos_aug if which == "aug" else self.cos_src, self.present)

    def to_markdown(self) -> str:
        C = len(self.present)
        names = [class_name(c) for c in range(C)]
        lines = [f"### Dataset `{self.dataset}`", ""]
        lines += ["Manhattan discrepancy (mean |feature - prototype| per dimension)", ""]
        lines += ["| Class | Source | Augmented |", "|---|---|---|"]
        for c in range(C):
            if self.present[c]:
                lines.append(f"| {names[c]} | {self.l1_src[c]:.4f} | {self.l1_aug[c]:.4f} |")
            else:
                lines.append(f"| {names[c]} | absent | absent |")
        for title, S in (("source", self.cos_src), ("augmented", self.cos_aug)):
            lines += ["", f"Cosine similarity, {title} prototypes (rows) vs class-wise features (columns)", ""]
            lines.append("| Class | " + " | ".join(names) + " |")
            lines.append("|---" * (C + 1) + "|")
            for i in range(C):
                cells = [f"{S[i, k]:.4f}" if self.present[i] and self.present[k] else "-" for k in range(C)]
                lines.append(f"| {names[i]} | " + " | ".join(cells) + " |")
        lines += ["", f"Diagonal minus off-diagonal cosine: source {self.diagonal_gap('src'):.4f}, "
                  f"augmented {self.diagonal_gap('aug'):.4f}", ""]
        return "\n".join(lines)

    def l1_rows(self) -> list[list[str]]:
        return [
            [self.dataset, class_name(c), str(int(self.present[c])), f"{self.l1_src[c]:.6f}", f"{self.l1_aug[c]:.6f}"]
            for c in range(len(self.present))
        ]


def dataset_class_features(state: TrainState, ds: Dataset, batch: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Class-wise features pooled over a whole dataset (pixel-weighted average)."""
    C, N = state.net.num_classes, state.net.feat_dim
    sums = np.zeros((C, N))
    counts = np.zeros(C)
    images = to_nchw(ds.images)
    with nx.no_grad():
        for i in range(0, len(images), batch):
            z = state.net.encode(nx.Tensor(images[i : i + batch]))
            cf = pool_class_features(z, ds.labels[i : i + batch], C)
            n = _pixel_counts(ds.labels[i : i + batch], z.shape[2], z.shape[3], C)
            sums += cf.values * n[:, None]
            counts += n
    present = counts > 0
    feats = np.where(present[:, None], sums / np.maximum(counts, 1)[:, None], 0.0)
    return feats, present


def _pixel_counts(labels, h, w, C) -> np.ndarray:
    from .protobank import downsample_labels

    small = downsample_labels(labels, h, w)
    return np.bincount(small[small != IGNORE_INDEX].reshape(-1).astype(np.int64), minlength=C)[:C].astype(np.float64)


def discrepancy_tables(state: TrainState, ds: Dataset) -> DiscrepancyTables:
    feats, present = dataset_class_features(state, ds)
    present = present & state.bank_src.initialized & state.bank_aug.initialized
    # compare in the representation the contrastive losses use
    f = _normalize_rows(feats)
    p_src = _normalize_rows(state.bank_src.prototypes)
    p_aug = _normalize_rows(state.bank_aug.prototypes)
    l1_src = np.where(present, np.abs(f - p_src).mean(axis=1), np.nan)
    l1_aug = np.where(present, np.abs(f - p_aug).mean(axis=1), np.nan)
    return DiscrepancyTables(ds.domain, present, l1_src, l1_aug, p_src @ f.T, p_aug @ f.T)


def discrepancy_report(checkpoint, datasets: Sequence) -> list[DiscrepancyTables]:
    state = _load(checkpoint)
    if not (state.bank_src.initialized.any() and state.bank_aug.initialized.any()):
        raise ConfigError("checkpoint has no initialised prototype banks")
    out = []
    for d in datasets:
        ds = d if isinstance(d, Dataset) else read_dataset(d)
        out.append(discrepancy_tables(state, ds))
    return out


def write_eval_outputs(out_dir, table: EvalTable, tables: Sequence[DiscrepancyTables]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(table.to_csv())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "class", "present", "l1_src", "l1_aug"])
    for t in tables:
        w.writerows(t.l1_rows())
    (out / "discrepancy_l1.csv").write_text(buf.getvalue())
    (out / "discrepancy.md").write_text("\n".join(t.to_markdown() for t in tables))


# -- multi-run report --------------------------------------------------------------------
@dataclass
class RunSummary:
    path: Path
    mode: str | None
    seed: int | None
    final_miou: dict[str, float] = field(default_factory=dict)
    losses: dict[str, list[float]] = field(default_factory=dict)
    miou_curve: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)


def read_run(run_dir) -> RunSummary:
    run = Path(run_dir)
    cfg_path = run / "config.cfg"
    cfg = read_meta_file(cfg_path) if cfg_path.is_file() else {}
    rs = RunSummary(run, cfg.get("ablation"), int(cfg["seed"]) if "seed" in cfg else None)
    if not cfg:
        rs.missing.append("config.cfg")
    log_path = run / "train_log.csv"
    if log_path.is_file():
        with open(log_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for key in LOG_FIELDS[1:]:
            rs.losses[key] = [float(r[key]) for r in rows]
        rs.losses["iter"] = [int(r["iter"]) for r in rows]
    else:
        rs.missing.append("train_log.csv")
    eval_log = run / "eval_log.csv"
    if eval_log.is_file():
        with open(eval_log, newline="") as fh:
            for r in csv.DictReader(fh):
                rs.miou_curve.setdefault(r["domain"], []).append((int(r["iter"]), float(r["miou"])))
    else:
        rs.missing.append("eval_log.csv")
    final = run / "eval.csv"
    if final.is_file():
        with open(final, newline="") as fh:
            for r in csv.DictReader(fh):
                rs.final_miou[r["domain"]] = float(r["miou"])
    elif rs.miou_curve:
        rs.final_miou = {d: pts[-1][1] for d, pts in rs.miou_curve.items()}
    else:
        rs.missing.append("eval.csv")
    return rs


@dataclass
class Report:
    runs: list[RunSummary]
    domains: list[str]
    rows: list[dict]

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "pcl", "upcl", "hpcl", "runs"] + self.domains + ["mean"])
        for r in self.rows:
            w.writerow(
                [r["method"], int(r["pcl"]), int(r["upcl"]), int(r["hpcl"]), r["runs"]]
                + [_pct(r["domains"].get(d)) for d in self.domains]
                + [_pct(r["mean"])]
            )
        return buf.getvalue()

    def summary_markdown(self) -> str:
        mark = lambda b: "✓" if b else "-"
        lines = [
            "| Method | PCL | UPCL | HPCL | Runs | " + " | ".join(self.domains) + " | Mean |",
            "|---" * (6 + len(self.domains)) + "|",
        ]
        for r in self.rows:
            cells = [_pct(r["domains"].get(d)) for d in self.domains]
            lines.append(
                f"| {r['method']} | {mark(r['pcl'])} | {mark(r['upcl'])} | {mark(r['hpcl'])} | {r['runs']} | "
                + " | ".join(cells)
                + f" | {_pct(r['mean'])} |"
            )
        missing = [f"- `{rs.path}`: missing {', '.join(rs.missing)}" for rs in self.runs if rs.missing]
        if missing:
            lines += ["", "Incomplete runs:", *missing]
        return "\n".join(lines) + "\n"


def _pct(v) -> str:
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.1f}"


def build_report(run_dirs: Sequence) -> Report:
    runs = [read_run(r) for r in run_dirs]
    domains = sorted({d for rs in runs for d in rs.final_miou})
    rows = []
    table4_modes = {mode for _, mode, *_ in TABLE4_ROWS}
    ordered = list(TABLE4_ROWS) + [
        (m, m, False, False, False) for m in sorted({rs.mode or "unknown" for rs in runs} - table4_modes)
    ]
    for method, mode, pcl, upcl, hpcl in ordered:
        group = [rs for rs in runs if (rs.mode or "unknown") == mode]
        if not group:
            continue
        per_dom = {}
        for d in domains:
            vals = [rs.final_miou[d] for rs in group if d in rs.final_miou]
            if vals:
                per_dom[d] = float(np.mean(vals))
        means = [float(np.mean([rs.final_miou[d] for d in domains])) for rs in group if all(d in rs.final_miou for d in domains)]
        rows.append(
            {
                "method": method,
                "mode": mode,
                "pcl": pcl,
                "upcl": upcl,
                "hpcl": hpcl,
                "runs": len(group),
                "domains": per_dom,
                "mean": float(np.mean(means)) if means else None,
                "run_means": means,
            }
        )
    return Report(runs, domains, rows)


def emit_report(run_dirs: Sequence, out_dir) -> Report:
    """Write summary.csv, summary.md and SVG loss/mIoU curves into ``out_dir``."""
    from .plotting import plot_loss_curves, plot_miou_curves

    report = build_report(run_dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(report.summary_csv())
    (out / "summary.md").write_text(report.summary_markdown())
    plot_loss_curves(report.runs, out / "loss_curves.svg")
    plot_miou_curves(report.runs, out / "miou_curves.svg")
    return report
