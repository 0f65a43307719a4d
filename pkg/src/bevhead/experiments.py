"""Experiment orchestration: datasets, train+eval cells, ablation matrices, diagnostics."""

from __future__ import annotations

import csv
import io
import math
import traceback
from dataclasses import dataclass, field

import numpy as np

from bevhead.config import RunConfig
from bevhead.decode import decode_detections, peak_pixels
from bevhead.head import HeadParams, head_forward_sparse
from bevhead.metrics import CLASS_NAMES, EvalReport, center_mrpe, evaluate, format_value, mse_sweep
from bevhead.scene import Frame, generate_frames, rasterize_features
from bevhead.train import TrainState, train_run

EVAL_ID_OFFSET = 1_000_000

# cell label -> overrides; labels double as CSV keys
PRESETS: dict[str, list[tuple[str, dict]]] = {
    "components": [
        ("a", {"strategy": "baseline", "iqp": "off", "iou_branch": False}),
        ("b", {"strategy": "dar_switch", "iqp": "off", "iou_branch": False}),
        ("c", {"strategy": "baseline", "iqp": "v2"}),
        ("d", {"strategy": "dar_switch", "iqp": "v2"}),
    ],
    "assignment": [
        ("multipos", {"strategy": "multipos", "iqp": "v2"}),
        ("dar_static", {"strategy": "dar_static", "iqp": "v2"}),
        ("dar_dynamic", {"strategy": "dar_dynamic", "iqp": "v2"}),
        ("dar_switch", {"strategy": "dar_switch", "iqp": "v2"}),
    ],
    "quality": [
        ("none", {"strategy": "dar_switch", "iqp": "off", "iou_branch": False}),
        ("direct", {"strategy": "dar_switch", "iqp": "off", "iou_branch": True}),
        ("v1", {"strategy": "dar_switch", "iqp": "v1"}),
        ("v2", {"strategy": "dar_switch", "iqp": "v2"}),
    ],
    "center": [
        ("baseline", {"strategy": "baseline", "iqp": "off", "iou_branch": True}),
        ("full", {"strategy": "dar_switch", "iqp": "v2"}),
    ],
}

METRIC_COLUMNS = ("mAP", "vehicle_ap", "pedestrian_ap", "cyclist_ap", "mrpe_percent", "mse_low", "mse_high", "offcenter_rate")
ABLATION_COLUMNS = ("matrix", "cell", "seed", "status", "config_hash") + METRIC_COLUMNS + ("error",)
DIAG_COLUMNS = ("config_hash", "model", "table", "key", "mrpe_percent", "mse_low", "mse_high")


def build_datasets(cfg: RunConfig) -> tuple[list[Frame], list[Frame]]:
    sc = cfg.scene_config()
    train = generate_frames(sc, cfg.data_seed, cfg.n_train, start_id=0)
    ev = generate_frames(sc, cfg.data_seed, cfg.n_eval, start_id=EVAL_ID_OFFSET)
    return train, ev


def predict(params: HeadParams, frames, cfg: RunConfig):
    """Detections and confidence maps for each frame."""
    grid = cfg.grid()
    dcfg = cfg.decode_config()
    dets, confs = [], []
    for fr in frames:
        X = rasterize_features(fr, grid, cfg.channels, range_scale=cfg.range_scale).data
        out, _ = head_forward_sparse(X, params, lambda conf: peak_pixels(conf, dcfg))
        dets.append(decode_detections(out, grid, dcfg))
        confs.append(out.conf)
    return dets, confs


def evaluate_params(params: HeadParams, frames, cfg: RunConfig) -> tuple[EvalReport, list]:
    dets, confs = predict(params, frames, cfg)
    rep = evaluate(dets, frames, cfg.grid(), confs, cfg.scene_config().num_classes, match_iou=cfg.match_iou)
    rep.config_hash = cfg.digest()
    return rep, dets


@dataclass
class CellResult:
    config: RunConfig
    state: TrainState
    logs: list
    report: EvalReport
    detections: list = field(default_factory=list)


def train_and_eval(cfg: RunConfig, train_frames, eval_frames) -> CellResult:
    state, logs = train_run(train_frames, cfg.train_config(), cfg.seed, cfg.grid())
    report, dets = evaluate_params(state.eval_params(), eval_frames, cfg)
    return CellResult(cfg, state, logs, report, dets)


class ResultCache:
    """Memo of finished cells keyed by config digest, shared across matrices."""

    def __init__(self):
        self.results: dict[str, CellResult] = {}

    def get(self, cfg: RunConfig, train_frames, eval_frames) -> CellResult:
        key = cfg.digest()
        if key not in self.results:
            self.results[key] = train_and_eval(cfg, train_frames, eval_frames)
        return self.results[key]


def metric_row(report: EvalReport) -> dict:
    r = report.row()
    return {c: r[c] for c in METRIC_COLUMNS}


def run_matrix(base: RunConfig, name: str, cells, seeds, train_frames, eval_frames, cache: ResultCache | None = None,
               progress=None) -> list[dict]:
    """Per-(cell, seed) rows followed by mean and sd rows per cell.

    A failing cell is recorded with its error and the remaining cells run on.
    """
    cache = cache or ResultCache()
    rows = []
    for label, overrides in cells:
        per_seed = []
        for seed in seeds:
            row = {"matrix": name, "cell": label, "seed": seed}
            try:
                cfg = base.with_overrides({**overrides, "seed": seed})
                row["config_hash"] = cfg.digest()
                res = cache.get(cfg, train_frames, eval_frames)
                row.update(metric_row(res.report), status="ok", error="")
                per_seed.append(row)
            except Exception as exc:  # a broken cell must not sink the matrix
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}".replace("\n", " "))
                if progress:
                    progress(traceback.format_exc())
            rows.append(row)
            if progress:
                progress(f"{name}/{label} seed={seed} {row.get('status')} mAP={row.get('mAP')}")
        rows += aggregate_rows(name, label, per_seed)
    return rows


def aggregate_rows(name: str, label: str, per_seed: list[dict]) -> list[dict]:
    mean = {"matrix": name, "cell": label, "seed": "mean", "status": "aggregate", "config_hash": "", "error": ""}
    sd = dict(mean, seed="sd")
    for c in METRIC_COLUMNS:
        vals = [r[c] for r in per_seed if r.get(c) is not None]
        mean[c] = float(np.mean(vals)) if vals else None
        sd[c] = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
    return [mean, sd]


def cell_means(rows: list[dict], metric: str) -> dict[str, float | None]:
    return {r["cell"]: r[metric] for r in rows if r["seed"] == "mean"}


def rows_to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r.get(c)) for c in columns])
    return buf.getvalue()


def diagnostic_rows(label: str, params: HeadParams, frames, cfg: RunConfig, detections=None) -> list[dict]:
    """Per-class MRPE rows and the quality-MSE threshold sweep for one model."""
    dets = detections if detections is not None else predict(params, frames, cfg)[0]
    grid = cfg.grid()
    overall, per_class = center_mrpe(dets, frames, grid, cfg.match_iou)
    h = cfg.digest()
    rows = [{"config_hash": h, "model": label, "table": "mrpe", "key": "all", "mrpe_percent": overall}]
    for c in range(cfg.scene_config().num_classes):
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}"
        rows.append({"config_hash": h, "model": label, "table": "mrpe", "key": name, "mrpe_percent": per_class.get(c)})
    for split, lo, hi in mse_sweep(dets, frames):
        rows.append({"config_hash": h, "model": label, "table": "mse_sweep", "key": f"{split:g}", "mse_low": lo, "mse_high": hi})
    return rows


def mean_or_none(vals):
    vals = [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else None
