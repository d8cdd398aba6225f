"""Metrics, ablation and sensitivity harness, and exploratory panel analyses."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import VARIANTS, RunConfig, apply_override
from .ingest import Dataset, RegionMap, ServiceRequest, chronological_split
from .panel import Panel, build_panel
from .predictor import ServiceTimeModel, ensure_workloads, train

log = logging.getLogger(__name__)

MAPE_EPS = 0.5  # days; denominator floor for the percentage error
METRICS = ("MAE", "MSE", "RMSE", "MAPE")


def compute_metrics(y_true, y_pred, eps: float = MAPE_EPS) -> dict:
    """MAE, MSE, RMSE and MAPE (in percent, denominator ``max(y, eps)``)."""
    y = np.asarray(y_true, dtype=float)
    yh = np.asarray(y_pred, dtype=float)
    if y.size == 0:
        raise ValueError("no (y, y_hat) pairs")
    if y.shape != yh.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yh.shape}")
    err = np.abs(y - yh)
    mse = float(np.mean(err**2))
    return {
        "MAE": float(err.mean()),
        "MSE": mse,
        "RMSE": math.sqrt(mse),
        "MAPE": float(100.0 * np.mean(err / np.maximum(y, eps))),
        "n": int(y.size),
    }


@dataclass
class MetricReport:
    """Rows of ``{"type", "variant", MAE, MSE, RMSE, MAPE, n}``; ``type == "ALL"`` pools every type."""

    rows: list[dict] = field(default_factory=list)

    def add(self, request_type: str, variant: str, metrics: Mapping) -> None:
        self.rows.append({"type": request_type, "variant": variant, **metrics})

    def extend(self, other: "MetricReport") -> "MetricReport":
        self.rows.extend(other.rows)
        return self

    def get(self, request_type: str, variant: str) -> dict:
        for row in self.rows:
            if row["type"] == request_type and row["variant"] == variant:
                return row
        raise KeyError((request_type, variant))

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r["variant"] for r in self.rows))

    def to_csv(self, path) -> None:
        cols = ["type", "variant", *METRICS, "n"]
        extra = sorted({k for r in self.rows for k in r} - set(cols))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols + extra)
            w.writeheader()
            w.writerows(self.rows)

    def to_json(self, path) -> None:
        doc = {"mape_epsilon_days": MAPE_EPS, "rows": self.rows}
        Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                for k in (*METRICS, "n"):
                    row[k] = int(row[k]) if k == "n" else float(row[k])
                rows.append(row)
        return cls(rows)

    def table(self, metric: str = "MAPE") -> str:
        """Plain-text type x variant table of one metric."""
        types = list(dict.fromkeys(r["type"] for r in self.rows))
        variants = self.variants()
        lines = ["type".ljust(24) + "".join(v.rjust(12) for v in variants)]
        for t in types:
            cells = []
            for v in variants:
                try:
                    cells.append(f"{self.get(t, v)[metric]:12.4f}")
                except KeyError:
                    cells.append(" " * 12)
            lines.append(t[:24].ljust(24) + "".join(cells))
        return "\n".join(lines)


def report_from_predictions(requests: Sequence[ServiceRequest], y_pred, variant: str,
                            type_vocabulary: Sequence[str]) -> MetricReport:
    y = np.array([r.service_time_days for r in requests])
    y_pred = np.asarray(y_pred, dtype=float)
    types = np.array([r.request_type for r in requests])
    rep = MetricReport()
    for label in type_vocabulary:
        sel = types == label
        if sel.any():
            rep.add(label, variant, compute_metrics(y[sel], y_pred[sel]))
    rep.add("ALL", variant, compute_metrics(y, y_pred))
    return rep


# ---------------------------------------------------------------------------
# experiment plumbing


@dataclass
class Experiment:
    """A chronological split with the panel covering both halves."""

    dataset: Dataset
    train: Dataset
    test: Dataset
    panel: Panel  # raw panel over train + test, imputation fallbacks from train days only
    region_count: int

    @classmethod
    def from_dataset(cls, ds: Dataset, train_fraction: float = 0.8,
                     region_count: int | None = None) -> "Experiment":
        ds = ds.with_requests(ensure_workloads(ds.requests))
        M = region_count or ds.region_count or max(r.region_id for r in ds) + 1
        ds.region_count = M
        tr, te = chronological_split(ds, train_fraction)
        tr.region_count = te.region_count = M
        panel = build_panel(ds, M, ds.type_vocabulary, train_end=tr.split_boundary.date())
        return cls(ds, tr, te, panel, M)

    @property
    def test_requests(self) -> list[ServiceRequest]:
        return [r for r in self.test if r.service_time_days is not None]

    def evaluate(self, model: ServiceTimeModel, variant: str | None = None) -> MetricReport:
        reqs = self.test_requests
        preds = model.predict_requests(reqs, self.panel)
        return report_from_predictions(reqs, [p.service_time_days for p in preds],
                                       variant or model.config.model.variant,
                                       self.dataset.type_vocabulary)

    def train_mean_baseline(self) -> MetricReport:
        """Each test request predicted by its type's mean training service time."""
        means = {}
        done = [r for r in self.train if r.service_time_days is not None]
        overall = float(np.mean([r.service_time_days for r in done]))
        for label in self.dataset.type_vocabulary:
            vals = [r.service_time_days for r in done if r.request_type == label]
            means[label] = float(np.mean(vals)) if vals else overall
        reqs = self.test_requests
        return report_from_predictions(reqs, [means[r.request_type] for r in reqs], "train-mean",
                                       self.dataset.type_vocabulary)

    def gpr_baseline(self, model: ServiceTimeModel) -> MetricReport:
        """The model's per-type GP means alone."""
        reqs = ensure_workloads(self.test_requests)
        mu = model.intra_raw(reqs, self.panel)[:, 0]
        return report_from_predictions(reqs, mu, "gpr-only", self.dataset.type_vocabulary)

    def fit(self, config: RunConfig) -> ServiceTimeModel:
        return train(self.train, config, region_count=self.region_count)


def run_ablation(exp: Experiment, config: RunConfig | None = None,
                 variants: Sequence[str] = VARIANTS,
                 checkpoints: Mapping[str, ServiceTimeModel | str | Path] | None = None,
                 baselines: bool = True) -> tuple[MetricReport, dict[str, ServiceTimeModel]]:
    """Evaluate every variant on the same split and seed.

    Variants are trained from ``config`` unless ``checkpoints`` is given, in
    which case every requested variant must be present there.
    """
    config = config or RunConfig()
    report = MetricReport()
    models = {}
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
        if checkpoints is not None:
            if v not in checkpoints:
                raise KeyError(f"no checkpoint for variant {v!r}")
            m = checkpoints[v]
            m = m if isinstance(m, ServiceTimeModel) else ServiceTimeModel.load(m)
        else:
            m = exp.fit(apply_override(config, "model.variant", v))
        models[v] = m
        report.extend(exp.evaluate(m, v))
        log.info("variant %s: MAPE %.2f%%", v, report.get("ALL", v)["MAPE"])
    if baselines:
        report.extend(exp.train_mean_baseline())
        report.extend(exp.gpr_baseline(next(iter(models.values()))))
    return report, models


def run_sweep(exp: Experiment, config: RunConfig, param: str, values: Iterable) -> MetricReport:
    """One pooled report row per value of ``param`` (a dotted config key, e.g. ``model.window``)."""
    report = MetricReport()
    for value in values:
        cfg = apply_override(config, param, value)
        row = exp.evaluate(exp.fit(cfg)).get("ALL", cfg.model.variant)
        report.rows.append({**row, "type": "ALL", "variant": cfg.model.variant, "param": param,
                            "value": value})
    return report


# ---------------------------------------------------------------------------
# exploratory analyses


def pearson(x, y) -> float:
    """Pearson correlation; NaN when fewer than 3 pairs or either series is constant."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size < 3 or x.std() == 0 or y.std() == 0:
        return float("nan")
    xc, yc = x - x.mean(), y - y.mean()
    return float((xc * yc).sum() / math.sqrt((xc * xc).sum() * (yc * yc).sum()))


def citywide_series(panel: Panel):
    """Daily citywide counts ``(N, D)``, request-weighted mean service time and
    an observed-day mask."""
    cnt = panel.r.sum(axis=0)
    weights = np.where(panel.mask, panel.r, 0.0)
    tot = (weights * panel.d).sum(axis=0)
    w = weights.sum(axis=0)
    observed = w > 0
    mean = np.divide(tot, w, out=np.full_like(tot, np.nan), where=observed)
    return cnt, mean, observed


def pearson_demand_service(panel: Panel, demand_type: int, service_type: int) -> float:
    """Correlation between daily citywide demand of ``demand_type`` and the mean
    service time of ``service_type``, over days where the latter was observed."""
    cnt, mean, observed = citywide_series(panel)
    ok = observed[service_type]
    if ok.sum() < 3:
        return float("nan")
    return pearson(cnt[demand_type, ok], mean[service_type, ok])


def polygon_neighbors(region_map: RegionMap) -> dict[int, list[int]]:
    polys = dict(region_map.polygons)
    out = {i: [] for i in polys}
    for i, gi in polys.items():
        for j, gj in polys.items():
            # a shared edge, not just a corner
            if i < j and gi.boundary.intersection(gj.boundary).length > 0:
                out[i].append(j)
                out[j].append(i)
    return {i: sorted(v) for i, v in out.items()}


def centroid_neighbors(centroids: Mapping[int, tuple[float, float]], k: int = 3) -> dict[int, list[int]]:
    ids = sorted(centroids)
    pts = np.array([centroids[i] for i in ids])
    out = {}
    for a, i in enumerate(ids):
        d = np.hypot(*(pts - pts[a]).T)
        order = [ids[b] for b in np.argsort(d, kind="stable") if b != a]
        out[i] = order[:k]
    return out


def region_neighbors(M: int, region_map: RegionMap | None = None,
                     centroids: Mapping[int, tuple[float, float]] | None = None, k: int = 3):
    if region_map is not None and region_map.polygons:
        return polygon_neighbors(region_map)
    if centroids:
        return centroid_neighbors(centroids, k)
    return {i: [j for j in (i - 1, i + 1) if 0 <= j < M] for i in range(M)}


def _quartiles(values: np.ndarray) -> tuple[float, float, float, float, float]:
    return (float(values.min()), *map(float, np.percentile(values, [25, 50, 75])), float(values.max()))


def challenge_data(panel: Panel, neighbors: Mapping[int, Sequence[int]],
                   requests: Sequence[ServiceRequest] | None = None) -> dict:
    """Numeric data behind the three challenge plots.

    ``scatter``: per region, its mean observed service time against the mean of
    its neighbours. ``series``: per region, daily request-weighted mean service
    time. ``boxes``: per type, five-number summary of request service times
    (cell means weighted by counts when ``requests`` is not given).
    """
    M, N, D = panel.shape
    obs_w = np.where(panel.mask, panel.r, 0.0)
    region_tot = (obs_w * panel.d).sum(axis=(1, 2))
    region_w = obs_w.sum(axis=(1, 2))
    region_mean = np.divide(region_tot, region_w, out=np.full(M, np.nan), where=region_w > 0)
    scatter = []
    for i in range(M):
        js = [j for j in neighbors.get(i, []) if np.isfinite(region_mean[j])]
        if js and np.isfinite(region_mean[i]):
            scatter.append((i, float(region_mean[i]), float(np.mean(region_mean[js]))))
    w_day = obs_w.sum(axis=1)
    series = np.divide((obs_w * panel.d).sum(axis=1), w_day, out=np.full((M, D), np.nan), where=w_day > 0)
    boxes = {}
    for l, label in enumerate(panel.type_vocabulary or range(N)):
        if requests is not None:
            vals = np.array([r.service_time_days for r in requests
                             if r.request_type == label and r.service_time_days is not None])
        else:
            m = panel.mask[:, l]
            vals = np.repeat(panel.d[:, l][m], panel.r[:, l][m].astype(int))
        if vals.size:
            boxes[str(label)] = _quartiles(vals)
    return {"scatter": scatter, "series": series, "boxes": boxes}


def challenge_plots(panel: Panel, out_dir, region_map: RegionMap | None = None,
                    requests: Sequence[ServiceRequest] | None = None) -> dict[str, Path]:
    """Write the spatial scatter, per-region time series and per-type box plots
    as SVG, each alongside the CSV it is drawn from."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    neighbors = region_neighbors(panel.M, region_map)
    data = challenge_data(panel, neighbors, requests)
    paths = {}

    p = out / "spatial_scatter.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "mean_service_time", "neighbor_mean_service_time"])
        w.writerows(data["scatter"])
    paths["spatial_csv"] = p
    fig, ax = plt.subplots(figsize=(4, 4))
    if data["scatter"]:
        _, x, y = zip(*data["scatter"])
        ax.scatter(x, y)
        lo, hi = min(x + y), max(x + y)
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("region mean service time (days)")
    ax.set_ylabel("neighbour mean service time (days)")
    paths["spatial_svg"] = out / "spatial_scatter.svg"
    fig.savefig(paths["spatial_svg"], format="svg", bbox_inches="tight")
    plt.close(fig)

    p = out / "temporal_series.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *[f"region_{i}" for i in range(panel.M)]])
        for t, day in enumerate(panel.days):
            w.writerow([day.isoformat(), *["" if np.isnan(v) else repr(float(v))
                                            for v in data["series"][:, t]]])
    paths["temporal_csv"] = p
    fig, ax = plt.subplots(figsize=(7, 3))
    for i in range(panel.M):
        ax.plot(panel.days, data["series"][i], marker="." if panel.D == 1 else None, lw=0.8,
                label=f"region {i}")
    ax.set_ylabel("mean service time (days)")
    ax.legend(fontsize=6, ncol=4)
    paths["temporal_svg"] = out / "temporal_series.svg"
    fig.savefig(paths["temporal_svg"], format="svg", bbox_inches="tight")
    plt.close(fig)

    p = out / "type_boxes.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["type", "min", "q1", "median", "q3", "max"])
        for label, q in data["boxes"].items():
            w.writerow([label, *q])
    paths["boxes_csv"] = p
    fig, ax = plt.subplots(figsize=(6, 3))
    labels = list(data["boxes"])
    ax.bxp([{"label": lab, "whislo": q[0], "q1": q[1], "med": q[2], "q3": q[3], "whishi": q[4],
             "fliers": []} for lab, q in data["boxes"].items()], showfliers=False)
    ax.set_xticks(range(1, len(labels) + 1), labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("service time (days)")
    paths["boxes_svg"] = out / "type_boxes.svg"
    fig.savefig(paths["boxes_svg"], format="svg", bbox_inches="tight")
    plt.close(fig)
    return paths


def dump_attention(model: ServiceTimeModel, panel: Panel, anchors: Sequence[int], path) -> None:
    """Head-averaged inter-type attention per anchor day, one CSV row per (day, type)."""
    import torch

    from .panel import standardize, window_tensor

    pstd = standardize(panel, model.panel_stats)
    with torch.no_grad():
        w = torch.as_tensor(window_tensor(pstd, anchors, model.window), dtype=torch.float32)
        _, _, attn = model.net.encode_days(w)
    vocab = model.type_vocabulary
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["date", "type", *vocab])
        if attn is None:
            return
        for k, a in enumerate(anchors):
            for l, label in enumerate(vocab):
                wr.writerow([panel.days[0].fromordinal(panel.days[0].toordinal() + int(a)).isoformat(),
                             label, *attn[k, l].tolist()])
