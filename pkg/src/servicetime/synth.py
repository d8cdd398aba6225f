"""Synthetic 311 data from a FIFO queueing simulation.

Requests arrive as Poisson counts per (region, type, day) whose rate carries a
deterministic weekly modulation, a citywide per-type shock and a per-region
shock that spills over to adjacent regions. Every type is served by a
department that dispatches work FIFO at a fixed daily capacity, so a burst of
one type delays every type sharing its department. Processing time grows with
the request's workload, which is also written into its description text.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .ingest import Dataset, RegionMap, ServiceRequest, write_requests

BULK_ITEMS = ("mattress", "sofa", "chair", "desk", "cabinet", "bed frame", "table", "dresser",
              "hamper", "flag pole", "recliner", "box spring")


@dataclass
class TypeSpec:
    label: str
    department: str
    base_rate: float  # expected requests per region per day
    weekly_amplitude: float = 0.3
    weekly_phase: float = 0.0  # days
    template: str = "bulk"  # bulk | bags | piles | none
    mean_items: float = 2.0
    units_per_item: float = 1.0
    base_processing: float = 0.3  # days
    processing_per_unit: float = 0.25  # days per work unit
    missing_description: float = 0.1
    shock_sd: float | None = None  # citywide demand shock; SimConfig.type_shock_sd when None


def _default_types() -> list[TypeSpec]:
    return [
        TypeSpec("Bulk Trash", "PW - Solid Waste", 4.0, 0.4, 0.0, "bulk", 2.5, 1.0, 0.3, 0.35,
                 shock_sd=0.45),
        TypeSpec("Bagged Yard Waste", "PW - Solid Waste", 2.0, 0.4, 1.75, "bags", 6.0, 0.3, 0.2, 0.3,
                 shock_sd=0.15),
        TypeSpec("Missed Garbage", "PW - Sanitation", 2.5, 0.4, 3.5, "none", 1.0, 1.0, 0.2, 0.1, 0.6,
                 shock_sd=0.45),
        TypeSpec("Brush Collection", "PW - Sanitation", 2.0, 0.4, 5.25, "piles", 2.0, 1.0, 0.4, 0.3,
                 shock_sd=0.15),
    ]


@dataclass
class SimConfig:
    n_regions: int = 5
    types: list[TypeSpec] = field(default_factory=_default_types)
    capacity: dict[str, float] = field(
        default_factory=lambda: {"PW - Solid Waste": 105.0, "PW - Sanitation": 50.0})
    horizon_days: int = 365
    start: datetime = datetime(2023, 1, 2)
    spillover: float = 0.6
    region_shock_sd: float = 0.35
    region_shock_persistence: float = 0.7
    type_shock_sd: float = 0.3
    type_shock_persistence: float = 0.7
    region_multipliers: list[float] | None = None
    travel_per_region: float = 0.15  # days per region step from the depot (region 0)
    workday_start_hour: float = 7.0
    workday_hours: float = 12.0
    seed: int = 7

    def __post_init__(self):
        for t in self.types:
            if t.department not in self.capacity:
                raise ValueError(f"no capacity for department {t.department!r}")
            if t.base_rate < 0:
                raise ValueError("rates must be nonnegative")
        if any(c <= 0 for c in self.capacity.values()):
            raise ValueError("capacities must be positive")

    @property
    def type_labels(self) -> list[str]:
        return [t.label for t in self.types]

    def expected_units(self, t: TypeSpec) -> float:
        return t.units_per_item * max(t.mean_items, 1.0) * self.n_regions * t.base_rate

    def separate_departments(self) -> "SimConfig":
        """Each type gets its own department, with the shared capacity split by expected load."""
        load = {}
        for t in self.types:
            load.setdefault(t.department, 0.0)
            load[t.department] += self.expected_units(t)
        caps, types = {}, []
        for t in self.types:
            name = f"{t.department} / {t.label}"
            caps[name] = self.capacity[t.department] * self.expected_units(t) / load[t.department]
            types.append(replace(t, department=name))
        return replace(self, types=types, capacity=caps)


@dataclass
class SimOutput:
    config: SimConfig
    requests: list[ServiceRequest]
    wait: np.ndarray  # days from creation to dispatch, per request (NaN when pending)
    processing: np.ndarray  # days from dispatch to completion (NaN when pending)
    units: np.ndarray
    department: list[str]
    dispatch: list[datetime | None]
    region_map: RegionMap
    type_intensity: np.ndarray  # (N, D) citywide rate factor: weekly modulation x type shock
    region_shock: np.ndarray  # (M, N, D) log-rate region factor including spillover
    arrivals: int = 0
    pending: int = 0

    def dataset(self) -> Dataset:
        return Dataset(list(self.requests), self.config.type_labels, region_count=self.config.n_regions)

    def to_csv(self, path, truth_path=None) -> None:
        """Requests in the ingest schema, plus a ground-truth sidecar."""
        write_requests(self.requests, path, self.region_map)
        truth_path = truth_path or Path(path).with_name(Path(path).stem + "_truth.csv")
        with open(truth_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["Request ID", "department", "dispatched_at", "wait_days", "processing_days",
                        "work_units"])
            for r, dep, disp, wt, pr, u in zip(self.requests, self.department, self.dispatch,
                                                self.wait, self.processing, self.units):
                w.writerow([r.request_id, dep, "" if disp is None else disp.isoformat(sep=" "),
                            repr(float(wt)), repr(float(pr)), repr(float(u))])


def region_polygons(M: int, lon0: float = -85.40, lat0: float = 35.00, width: float = 0.04,
                    height: float = 0.08) -> RegionMap:
    """``M`` side-by-side rectangles; region ``i`` borders ``i - 1`` and ``i + 1``."""
    from shapely.geometry import box

    rmap = RegionMap(M=M, id_mapping={str(i + 1): i for i in range(M)})
    rmap.polygons = [(i, box(lon0 + i * width, lat0, lon0 + (i + 1) * width, lat0 + height))
                     for i in range(M)]
    return rmap


def line_neighbors(M: int) -> dict[int, list[int]]:
    return {i: [j for j in (i - 1, i + 1) if 0 <= j < M] for i in range(M)}


def _ar1(rng, shape, sd, rho):
    out = np.zeros(shape)
    innov = rng.normal(0.0, sd * math.sqrt(1 - rho**2), size=shape)
    out[..., 0] = rng.normal(0.0, sd, size=shape[:-1])
    for t in range(1, shape[-1]):
        out[..., t] = rho * out[..., t - 1] + innov[..., t]
    return out


def _description(rng, spec: TypeSpec) -> tuple[str | None, float]:
    """Description text and its total item count."""
    if spec.template == "bags":
        k = 1 + rng.poisson(max(spec.mean_items - 1, 0))
        return f"{k} bags of {rng.choice(['leaves', 'yard debris', 'grass clippings'])}", k
    if spec.template == "piles":
        k = 1 + rng.poisson(max(spec.mean_items - 1, 0))
        return f"{k} piles of brush", k
    if spec.template == "bulk":
        segs = 1 + rng.poisson(max(spec.mean_items / 1.6 - 1, 0))
        names = rng.choice(BULK_ITEMS, size=min(segs, len(BULK_ITEMS)), replace=False)
        parts, total = [], 0
        for name in names:
            q = 1 + rng.poisson(0.6)
            total += q
            parts.append(f"{q} {name}" if q > 1 else str(name))
        return ", ".join(parts), total
    return "cart not emptied", 1


def simulate(config: SimConfig | None = None) -> SimOutput:
    cfg = config or SimConfig()
    rng = np.random.default_rng(cfg.seed)
    M, N, D = cfg.n_regions, len(cfg.types), cfg.horizon_days
    days = np.arange(D)
    mult = np.asarray(cfg.region_multipliers or np.linspace(0.8, 1.2, M))

    weekly = np.stack([1 + t.weekly_amplitude * np.sin(2 * np.pi * (days + t.weekly_phase) / 7)
                       for t in cfg.types])  # (N, D)
    shock_sd = np.array([cfg.type_shock_sd if t.shock_sd is None else t.shock_sd for t in cfg.types])
    type_shock = shock_sd[:, None] * _ar1(rng, (N, D), 1.0, cfg.type_shock_persistence)
    local = _ar1(rng, (M, N, D), cfg.region_shock_sd, cfg.region_shock_persistence)
    nbrs = line_neighbors(M)
    spill = np.stack([local[i] + cfg.spillover * np.mean([local[j] for j in nbrs[i]], axis=0)
                      if nbrs[i] else local[i] for i in range(M)])
    intensity = weekly * np.exp(type_shock)
    rates = np.array([t.base_rate for t in cfg.types])
    lam = mult[:, None, None] * rates[None, :, None] * intensity[None] * np.exp(spill)
    counts = rng.poisson(lam)

    rmap = region_polygons(M)
    bounds = {rid: g.bounds for rid, g in rmap.polygons}
    arrivals = []  # (created, region, type, description, items)
    for t in range(D):
        day0 = cfg.start + timedelta(days=int(t))
        for i in range(M):
            for l in range(N):
                for _ in range(counts[i, l, t]):
                    minute = int(rng.uniform(cfg.workday_start_hour * 60,
                                             (cfg.workday_start_hour + cfg.workday_hours) * 60))
                    created = day0 + timedelta(minutes=minute)
                    desc, items = _description(rng, cfg.types[l])
                    if rng.random() < cfg.types[l].missing_description:
                        desc = None
                    x0, y0, x1, y1 = bounds[i]
                    lon, lat = rng.uniform(x0, x1), rng.uniform(y0, y1)
                    arrivals.append((created, i, l, desc, items, round(lon, 6), round(lat, 6)))
    arrivals.sort(key=lambda a: (a[0], a[1], a[2]))

    horizon_end = cfg.start + timedelta(days=D)
    free = {dep: cfg.start for dep in cfg.capacity}
    reqs, wait, proc, units, deps, disp = [], [], [], [], [], []
    pending = 0
    for n, (created, i, l, desc, items, lon, lat) in enumerate(arrivals):
        spec = cfg.types[l]
        dep = spec.department
        u = spec.units_per_item * items
        start = max(created, free[dep])
        free[dep] = start + timedelta(days=u / cfg.capacity[dep])
        start = start.replace(microsecond=0)
        p = spec.base_processing + spec.processing_per_unit * u + cfg.travel_per_region * i
        done = (start + timedelta(days=p)).replace(microsecond=0)
        if done > horizon_end:
            done = None
            pending += 1
        reqs.append(ServiceRequest(
            request_id=f"SYN{n:07d}", created_at=created, completed_at=done, department=dep,
            request_type=spec.label, longitude=lon, latitude=lat, region_id=i, description=desc))
        if done is None:
            wait.append(np.nan)
            proc.append(np.nan)
            disp.append(None)
        else:
            wait.append((start - created).total_seconds() / 86400)
            proc.append((done - start).total_seconds() / 86400)
            disp.append(start)
        units.append(u)
        deps.append(dep)
    return SimOutput(cfg, reqs, np.array(wait), np.array(proc), np.array(units), deps, disp, rmap,
                     intensity, spill, len(arrivals), pending)


# ---------------------------------------------------------------------------
# phenomena checks


@dataclass
class PhenomenaReport:
    spatial_correlation: float
    weekly_acf: dict[int, float]
    cross_type_correlation: float
    within_type_iqr: dict[str, float]
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def as_dict(self) -> dict:
        return {"passed": self.passed, "spatial_correlation": self.spatial_correlation,
                "weekly_acf": {str(k): v for k, v in self.weekly_acf.items()},
                "cross_type_correlation": self.cross_type_correlation,
                "within_type_iqr": self.within_type_iqr, "failures": self.failures}


def _pearson(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size < 3 or x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def spatial_anomaly_correlation(out: SimOutput) -> float:
    """Mean Pearson correlation between each region's demand anomaly and its
    neighbours', where the anomaly is observed count over the citywide expected
    count (type shocks and weekly modulation removed)."""
    cfg = out.config
    M, N, D = cfg.n_regions, len(cfg.types), cfg.horizon_days
    counts = np.zeros((M, N, D))
    t_index = {t: k for k, t in enumerate(cfg.type_labels)}
    for r in out.requests:
        counts[r.region_id, t_index[r.request_type], (r.created_at - cfg.start).days] += 1
    mult = np.asarray(cfg.region_multipliers or np.linspace(0.8, 1.2, M))
    rates = np.array([t.base_rate for t in cfg.types])
    expected = mult[:, None, None] * rates[None, :, None] * out.type_intensity[None]
    anomaly = counts / expected - 1.0
    corrs = []
    for i, js in line_neighbors(M).items():
        for j in js:
            if j > i:
                for l in range(N):
                    c = _pearson(anomaly[i, l], anomaly[j, l])
                    if math.isfinite(c):
                        corrs.append(c)
    return float(np.mean(corrs)) if corrs else float("nan")


def daily_series(out: SimOutput):
    """Citywide daily counts ``(N, D)`` and mean completed service time (NaN if none)."""
    cfg = out.config
    N, D = len(cfg.types), cfg.horizon_days
    t_index = {t: k for k, t in enumerate(cfg.type_labels)}
    cnt = np.zeros((N, D))
    st_sum = np.zeros((N, D))
    st_cnt = np.zeros((N, D))
    for r in out.requests:
        l, t = t_index[r.request_type], (r.created_at - cfg.start).days
        cnt[l, t] += 1
        if r.service_time_days is not None:
            st_sum[l, t] += r.service_time_days
            st_cnt[l, t] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_st = np.where(st_cnt > 0, st_sum / st_cnt, np.nan)
    return cnt, mean_st


def acf(x, max_lag: int) -> dict[int, float]:
    x = np.asarray(x, float) - np.mean(x)
    denom = (x * x).sum()
    return {k: float((x[:-k] * x[k:]).sum() / denom) for k in range(1, max_lag + 1)}


def verify_phenomena(out: SimOutput, pair: tuple[int, int] = (0, 1),
                     cross_threshold: float = 0.3, spatial_control: float = 0.1) -> PhenomenaReport:
    """Check the simulated data shows the correlations the model is meant to exploit.

    Failures are collected in ``report.failures``; nothing is raised.
    """
    cfg = out.config
    failures = []
    if cfg.horizon_days < 120:
        failures.append(f"horizon {cfg.horizon_days} < 120 days")
    rho_s = spatial_anomaly_correlation(out)
    if cfg.spillover > 0 and not rho_s > 0:
        failures.append(f"spatial: neighbour correlation {rho_s:.3f} not positive with spillover")
    if cfg.spillover == 0 and not abs(rho_s) < spatial_control:
        failures.append(f"spatial control: |rho| = {abs(rho_s):.3f} >= {spatial_control}")

    cnt, mean_st = daily_series(out)
    per_type = [acf(c, 14) for c in cnt if c.std() > 0]
    ac = {k: float(np.mean([a[k] for a in per_type])) for k in range(1, 15)}
    if not (ac[7] > ac[6] and ac[7] > ac[8]):
        failures.append(f"weekly: autocorrelation has no peak at lag 7 ({ac[6]:.3f}, {ac[7]:.3f}, {ac[8]:.3f})")

    a, b = pair
    ok = np.isfinite(mean_st[b])
    rho_x = _pearson(cnt[a, ok], mean_st[b, ok])
    shared = cfg.types[a].department == cfg.types[b].department
    if shared and not rho_x > cross_threshold:
        failures.append(f"cross-type: corr({cfg.types[a].label} demand, {cfg.types[b].label} "
                        f"service time) = {rho_x:.3f} <= {cross_threshold}")

    iqr = {}
    for l, spec in enumerate(cfg.types):
        st = np.array([r.service_time_days for r in out.requests
                       if r.request_type == spec.label and r.service_time_days is not None])
        iqr[spec.label] = float(np.subtract(*np.percentile(st, [75, 25]))) if st.size else float("nan")
        if st.size and not iqr[spec.label] > 0:
            failures.append(f"variation: {spec.label} service-time IQR is 0")
    return PhenomenaReport(rho_s, ac, rho_x, iqr, failures)
