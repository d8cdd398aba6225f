"""Parsing of raw 311 service-request exports.

Turns a CSV export into an ordered :class:`Dataset` of :class:`ServiceRequest`
records with derived service times (fractional days) and contiguous region ids,
and cuts chronological train/test splits.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, asdict, replace
from datetime import datetime
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

MAX_SERVICE_DAYS = 80.0
UNASSIGNED = -1

TIMESTAMP_FORMATS = (
    "%m/%d/%Y %H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %I:%M:%S %p",
    "%m/%d/%Y %I:%M %p",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%dT%H:%M:%S.%f",
    "%m/%d/%Y",
    "%Y-%m-%d",
)


class SchemaError(ValueError):
    """A mandatory column is absent from the input header."""


def parse_timestamp(value: str | None) -> datetime | None:
    """Parse a local civil-time timestamp; ``None`` for blank input.

    Raises ``ValueError`` when the text is non-blank but matches no known format.
    """
    value = (value or "").strip()
    if not value:
        return None
    for fmt in TIMESTAMP_FORMATS:
        try:
            return datetime.strptime(value, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparseable timestamp {value!r}")


def service_days(created: datetime, completed: datetime) -> float:
    return (completed - created).total_seconds() / 86400.0


@dataclass(frozen=True)
class ServiceRequest:
    request_id: str
    created_at: datetime
    completed_at: datetime | None
    department: str
    request_type: str
    longitude: float
    latitude: float
    region_id: int
    description: str | None = None
    service_time_days: float | None = None
    workload: float | None = None

    def __post_init__(self):
        if self.completed_at is not None:
            if self.completed_at < self.created_at:
                raise ValueError(f"{self.request_id}: completed before created")
            if self.service_time_days is None:
                object.__setattr__(
                    self, "service_time_days", service_days(self.created_at, self.completed_at)
                )
        elif self.service_time_days is not None:
            raise ValueError(f"{self.request_id}: service time without completion")

    @property
    def day(self):
        return self.created_at.date()


@dataclass
class RegionMap:
    """Contiguous region ids, optionally backed by boundary polygons."""

    M: int
    id_mapping: dict[str, int] = field(default_factory=dict)
    polygons: list = field(default_factory=list)  # (region_id, shapely geometry)

    def __post_init__(self):
        self._prepared = None

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "RegionMap":
        """Map raw district labels to ``0..M-1``, ordered numerically when possible."""
        uniq = {str(lab).strip() for lab in labels if str(lab).strip()}

        def key(lab):
            try:
                return (0, float(lab), lab)
            except ValueError:
                return (1, 0.0, lab)

        ordered = sorted(uniq, key=key)
        return cls(M=len(ordered), id_mapping={lab: i for i, lab in enumerate(ordered)})

    @classmethod
    def from_geojson(cls, path_or_obj, id_property: str = "id") -> "RegionMap":
        from shapely.geometry import shape

        if isinstance(path_or_obj, (str, Path)):
            obj = json.loads(Path(path_or_obj).read_text(encoding="utf-8"))
        else:
            obj = path_or_obj
        feats = obj["features"]
        labels = [str(f["properties"][id_property]) for f in feats]
        rmap = cls.from_labels(labels)
        rmap.polygons = sorted(
            ((rmap.id_mapping[lab], shape(f["geometry"])) for lab, f in zip(labels, feats)),
            key=lambda p: p[0],
        )
        return rmap

    def to_geojson(self) -> dict:
        from shapely.geometry import mapping

        inverse = {v: k for k, v in self.id_mapping.items()}
        return {
            "type": "FeatureCollection",
            "features": [
                {
                    "type": "Feature",
                    "properties": {"id": inverse.get(rid, str(rid))},
                    "geometry": mapping(geom),
                }
                for rid, geom in self.polygons
            ],
        }

    def lookup(self, label) -> int:
        return self.id_mapping.get(str(label).strip(), UNASSIGNED)

    def centroids(self) -> dict[int, tuple[float, float]]:
        return {rid: (g.centroid.x, g.centroid.y) for rid, g in self.polygons}

    def prepared(self):
        if self._prepared is None:
            from shapely.prepared import prep

            self._prepared = [(rid, prep(g)) for rid, g in sorted(self.polygons, key=lambda p: p[0])]
        return self._prepared


def assign_region(lon: float, lat: float, region_map: RegionMap) -> int:
    """Id of the polygon covering ``(lon, lat)``; boundary points go to the lowest id.

    Returns ``UNASSIGNED`` when no polygon covers the point.
    """
    if not region_map.polygons:
        raise ValueError("region map has no polygons")
    from shapely.geometry import Point

    pt = Point(lon, lat)
    # prepared polygons are sorted by id, so the first hit is the lowest id
    for rid, geom in region_map.prepared():
        if geom.covers(pt):
            return rid
    return UNASSIGNED


@dataclass
class IngestSchema:
    """Column names of one city's export."""

    created: str = "Created Date"
    completed: str = "Completed At"
    department: str = "Department"
    request_type: str = "Request Type"
    longitude: str | None = "Longitude"
    latitude: str | None = "Latitude"
    location: str | None = None  # "(lon, lat)" text when coordinates share a column
    district: str | None = "Council District"
    description: str | None = "Description"
    request_id: str | None = "Request ID"
    workload: str | None = None

    def mandatory(self) -> list[str]:
        cols = [self.created, self.completed, self.department, self.request_type]
        if self.location:
            cols.append(self.location)
        else:
            cols += [c for c in (self.longitude, self.latitude) if c]
        return cols


@dataclass
class IngestReport:
    total: int = 0
    retained: int = 0
    skipped: int = 0
    capped: int = 0
    unassigned: int = 0
    skip_reasons: Counter = field(default_factory=Counter)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["skip_reasons"] = dict(self.skip_reasons)
        return d

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2), encoding="utf-8")


@dataclass
class Dataset:
    requests: list[ServiceRequest]
    type_vocabulary: list[str]
    split_boundary: datetime | None = None
    region_count: int | None = None
    report: IngestReport | None = None

    def __post_init__(self):
        self.requests = sorted(self.requests, key=lambda r: (r.created_at, r.request_id))

    def __len__(self):
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    def type_index(self, label: str) -> int:
        try:
            return self.type_vocabulary.index(label)
        except ValueError:
            raise KeyError(
                f"unknown request type {label!r}; known: {self.type_vocabulary}"
            ) from None

    def with_requests(self, requests: Sequence[ServiceRequest], **kw) -> "Dataset":
        return Dataset(
            list(requests),
            list(self.type_vocabulary),
            kw.get("split_boundary", self.split_boundary),
            self.region_count,
        )

    def with_workloads(self, scores: Sequence[float]) -> "Dataset":
        reqs = [replace(r, workload=float(w)) for r, w in zip(self.requests, scores)]
        return self.with_requests(reqs)


def _parse_location(text: str) -> tuple[float, float]:
    parts = text.strip().strip("()[]").split(",")
    if len(parts) != 2:
        raise ValueError(f"bad location {text!r}")
    return float(parts[0]), float(parts[1])


def parse_requests(
    file: IO[str] | IO[bytes] | str | Path,
    region_map: RegionMap,
    schema: IngestSchema | None = None,
    type_vocabulary: Sequence[str] | None = None,
    max_service_days: float = MAX_SERVICE_DAYS,
) -> Dataset:
    """Read a CSV export into a :class:`Dataset`.

    Malformed rows are skipped and counted; completed requests over
    ``max_service_days`` are dropped and counted as capped; rows whose region
    cannot be resolved are counted as unassigned. The report is attached as
    ``dataset.report``.
    """
    schema = schema or IngestSchema()
    if isinstance(file, (str, Path)):
        fh = open(file, encoding="utf-8-sig", newline="")
        close = True
    else:
        fh = file
        close = False
        if isinstance(fh, io.BufferedIOBase) or "b" in getattr(fh, "mode", ""):
            fh = io.TextIOWrapper(fh, encoding="utf-8-sig", newline="")
    try:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in schema.mandatory():
            if col not in header:
                raise SchemaError(f"missing mandatory column {col!r}")
        if not region_map.polygons and (not schema.district or schema.district not in header):
            raise SchemaError(
                f"missing mandatory column {schema.district!r} (no region polygons supplied)"
            )
        vocab = list(type_vocabulary) if type_vocabulary is not None else None
        report = IngestReport()
        kept: list[ServiceRequest] = []
        for n, row in enumerate(reader):
            report.total += 1
            try:
                req = _row_to_request(row, n, schema, region_map)
            except (ValueError, TypeError) as exc:
                log.debug("row %d skipped: %s", n, exc)
                report.skipped += 1
                report.skip_reasons["malformed"] += 1
                continue
            if vocab is not None and req.request_type not in vocab:
                report.skipped += 1
                report.skip_reasons["type_not_in_vocabulary"] += 1
                continue
            if req.region_id == UNASSIGNED:
                report.unassigned += 1
                continue
            if req.service_time_days is not None and req.service_time_days > max_service_days:
                report.capped += 1
                continue
            kept.append(req)
            report.retained += 1
    finally:
        if close:
            fh.close()
    if report.skip_reasons.get("malformed"):
        log.warning("skipped %d malformed rows", report.skip_reasons["malformed"])
    if report.capped:
        log.info("dropped %d requests over %.0f days", report.capped, max_service_days)
    if vocab is None:
        vocab = sorted({r.request_type for r in kept})
    ds = Dataset(kept, vocab, region_count=region_map.M)
    ds.report = report
    return ds


def _row_to_request(row: Mapping[str, str], n: int, schema: IngestSchema, region_map: RegionMap):
    created = parse_timestamp(row[schema.created])
    if created is None:
        raise ValueError("missing created timestamp")
    completed = parse_timestamp(row.get(schema.completed))
    if schema.location:
        lon, lat = _parse_location(row[schema.location])
    else:
        lon, lat = float(row[schema.longitude]), float(row[schema.latitude])
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise ValueError("non-finite coordinates")
    rtype = (row[schema.request_type] or "").strip()
    if not rtype:
        raise ValueError("blank request type")
    region = UNASSIGNED
    if schema.district and (row.get(schema.district) or "").strip():
        region = region_map.lookup(row[schema.district])
    if region == UNASSIGNED and region_map.polygons:
        region = assign_region(lon, lat, region_map)
    desc = row.get(schema.description) if schema.description else None
    desc = desc if desc and desc.strip() else None
    rid = (row.get(schema.request_id) or "").strip() if schema.request_id else ""
    workload = None
    if schema.workload and (row.get(schema.workload) or "").strip():
        workload = float(row[schema.workload])
    return ServiceRequest(
        request_id=rid or f"row{n}",
        created_at=created,
        completed_at=completed,
        department=(row[schema.department] or "").strip(),
        request_type=rtype,
        longitude=lon,
        latitude=lat,
        region_id=region,
        description=desc,
        workload=workload,
    )


def _fmt_ts(ts: datetime | None) -> str:
    if ts is None:
        return ""
    return ts.isoformat(sep=" ")


def write_requests(ds: Dataset | Iterable[ServiceRequest], file, region_map: RegionMap | None = None,
                   schema: IngestSchema | None = None) -> None:
    """Serialize requests in the ingest schema so :func:`parse_requests` reads them back."""
    schema = schema or IngestSchema(workload="Workload")
    inverse = {v: k for k, v in region_map.id_mapping.items()} if region_map else {}
    cols = [schema.request_id, schema.created, schema.completed, schema.department,
            schema.request_type, schema.longitude, schema.latitude, schema.district,
            schema.description]
    if schema.workload:
        cols.append(schema.workload)
    close = False
    if isinstance(file, (str, Path)):
        file = open(file, "w", encoding="utf-8", newline="")
        close = True
    try:
        w = csv.writer(file)
        w.writerow(cols)
        for r in ds:
            row = [r.request_id, _fmt_ts(r.created_at), _fmt_ts(r.completed_at), r.department,
                   r.request_type, repr(r.longitude), repr(r.latitude),
                   inverse.get(r.region_id, str(r.region_id)), r.description or ""]
            if schema.workload:
                row.append("" if r.workload is None else repr(r.workload))
            w.writerow(row)
    finally:
        if close:
            file.close()


def chronological_split(ds: Dataset, train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
    """Split at the ``train_fraction`` quantile of creation time.

    Train holds every request strictly before the boundary, test the rest.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(ds)
    if n == 0:
        raise ValueError("empty dataset")
    times = [r.created_at for r in ds.requests]
    k = min(max(int(round(train_fraction * n)), 1), n - 1) if n > 1 else 0
    boundary = times[k]
    train = [r for r in ds.requests if r.created_at < boundary]
    test = [r for r in ds.requests if r.created_at >= boundary]
    if not train or not test:
        raise ValueError("degenerate dataset: cannot split (all requests share a timestamp?)")
    return (ds.with_requests(train, split_boundary=boundary),
            ds.with_requests(test, split_boundary=boundary))
