import io
from datetime import datetime, timedelta

import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import box

from servicetime.ingest import (
    UNASSIGNED, Dataset, RegionMap, SchemaError, ServiceRequest, assign_region, chronological_split,
    parse_requests, write_requests,
)

HEADER = "Created Date,Completed At,Department,Request Type,Longitude,Latitude,Council District,Description\n"


def parse(rows, **kw):
    text = HEADER + "".join(r + "\n" for r in rows)
    rmap = kw.pop("rmap", RegionMap.from_labels(["1", "2", "3"]))
    return parse_requests(io.StringIO(text), rmap, **kw)


def test_table_row_service_time():
    ds = parse(['1/2/2023 8:13,1/4/2023 10:31,PW - Solid Waste,Brush Collection,-85.2846,35.0979,2,'
                'Holiday tree pickup'])
    (r,) = ds.requests
    assert r.service_time_days == pytest.approx(2.0958, abs=1e-4)
    assert r.region_id == 1 and r.description == "Holiday tree pickup"


def test_zero_duration():
    ds = parse(["1/2/2023 8:13,1/2/2023 8:13,D,T,-85,35,1,"])
    assert ds.requests[0].service_time_days == 0.0
    assert ds.requests[0].description is None


def test_cap_excludes_and_counts():
    created = datetime(2023, 1, 1)
    done = created + timedelta(days=81)
    ds = parse([f"{created:%m/%d/%Y %H:%M},{done:%m/%d/%Y %H:%M},D,T,-85,35,1,x",
                "1/2/2023 8:00,,D,T,-85,35,1,open"])
    assert ds.report.capped == 1 and len(ds) == 1
    assert ds.requests[0].service_time_days is None


def test_bad_rows_skipped_and_accounted():
    ds = parse(["garbage,1/2/2023 8:13,D,T,-85,35,1,x",
                "1/2/2023 8:13,1/3/2023 8:13,D,T,-85,35,9,x",  # unknown district, no polygons
                "1/2/2023 8:13,1/3/2023 8:13,D,T,-85,35,1,x"])
    rep = ds.report
    assert (rep.total, rep.retained, rep.skipped, rep.unassigned) == (3, 1, 1, 1)
    assert rep.retained + rep.skipped + rep.capped + rep.unassigned == rep.total


def test_missing_column_named():
    with pytest.raises(SchemaError, match="Request Type"):
        parse_requests(io.StringIO("Created Date,Completed At,Department,Longitude,Latitude\n"),
                       RegionMap.from_labels(["1"]))


def test_vocabulary_filter():
    ds = parse(["1/2/2023 8:13,1/3/2023 8:13,D,T,-85,35,1,x", "1/2/2023 8:13,1/3/2023 8:13,D,U,-85,35,1,x"],
               type_vocabulary=["T"])
    assert [r.request_type for r in ds] == ["T"]
    assert ds.report.skip_reasons["type_not_in_vocabulary"] == 1


def test_completed_before_created_rejected():
    with pytest.raises(ValueError):
        ServiceRequest("x", datetime(2023, 1, 2), datetime(2023, 1, 1), "D", "T", 0, 0, 0)


def grid_map():
    # 0 | 1 on the bottom row, 2 | 3 on top, plus an L-shaped neighbour check via ids
    polys = {"1": box(0, 0, 1, 1), "2": box(1, 0, 2, 1), "3": box(0, 1, 1, 2), "4": box(1, 1, 2, 2)}
    feats = [{"type": "Feature", "properties": {"id": k}, "geometry": g.__geo_interface__}
             for k, g in polys.items()]
    return RegionMap.from_geojson({"type": "FeatureCollection", "features": feats})


def test_assign_region_containment_and_outside():
    rmap = grid_map()
    assert assign_region(0.5, 1.5, rmap) == rmap.lookup("3")
    assert assign_region(5, 5, rmap) == UNASSIGNED


def test_assign_region_shared_edge_lowest_id():
    rmap = grid_map()
    # edge between "1" (id 0) and "3" (id 2)
    assert assign_region(0.5, 1.0, rmap) == 0
    # corner shared by all four
    assert assign_region(1.0, 1.0, rmap) == 0


def test_polygon_assignment_when_district_blank():
    rmap = grid_map()
    text = HEADER + "1/2/2023 8:13,1/3/2023 8:13,D,T,1.5,1.5,,x\n"
    ds = parse_requests(io.StringIO(text), rmap)
    assert ds.requests[0].region_id == rmap.lookup("4")


def _days(n):
    t0 = datetime(2023, 1, 1)
    return Dataset([ServiceRequest(f"r{i}", t0 + timedelta(days=i), None, "D", "T", 0, 0, 0)
                    for i in range(n)], ["T"])


def test_split_examples():
    tr, te = chronological_split(_days(10), 0.8)
    assert len(tr) == 8 and len(te) == 2
    assert all(r.created_at < tr.split_boundary for r in tr)
    tr, te = chronological_split(_days(4), 0.5)
    assert (len(tr), len(te)) == (2, 2)
    with pytest.raises(ValueError):
        chronological_split(_days(4), 1.0)


def test_split_degenerate():
    t0 = datetime(2023, 1, 1)
    ds = Dataset([ServiceRequest(f"r{i}", t0, None, "D", "T", 0, 0, 0) for i in range(5)], ["T"])
    with pytest.raises(ValueError):
        chronological_split(ds)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 60), min_size=2, max_size=40), st.floats(0.05, 0.95))
def test_split_partition_property(offsets, frac):
    t0 = datetime(2023, 1, 1)
    ds = Dataset([ServiceRequest(f"r{i}", t0 + timedelta(days=o), None, "D", "T", 0, 0, 0)
                  for i, o in enumerate(offsets)], ["T"])
    try:
        tr, te = chronological_split(ds, frac)
    except ValueError:
        # only possible when the quantile timestamp ties with the earliest one
        times = sorted(offsets)
        k = min(max(round(frac * len(times)), 1), len(times) - 1)
        assert times[k] == times[0]
        return
    ids_tr, ids_te = {r.request_id for r in tr}, {r.request_id for r in te}
    assert not ids_tr & ids_te
    assert ids_tr | ids_te == {r.request_id for r in ds}


stamps = st.datetimes(datetime(2020, 1, 1), datetime(2025, 1, 1)).map(lambda d: d.replace(microsecond=0))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(stamps, st.floats(0, 70), st.sampled_from(["A", "B c"]),
                          st.sampled_from([None, "2 chairs", "sofa, table"]), st.integers(0, 2),
                          st.floats(-90, 90, allow_nan=False)), min_size=1, max_size=15))
def test_round_trip(rows):
    rmap = RegionMap.from_labels(["1", "2", "3"])
    reqs = []
    for k, (ts, dur, t, desc, reg, lon) in enumerate(rows):
        done = (ts + timedelta(minutes=round(dur * 1440))) if k % 3 else None
        reqs.append(ServiceRequest(f"id{k}", ts, done, "Dept", t, lon, 35.5, reg, desc,
                                   workload=float(k % 4)))
    buf = io.StringIO()
    write_requests(reqs, buf, rmap)
    from servicetime.ingest import IngestSchema

    back = parse_requests(io.StringIO(buf.getvalue()), rmap, IngestSchema(workload="Workload"))
    assert sorted(back.requests, key=lambda r: r.request_id) == sorted(reqs, key=lambda r: r.request_id)
