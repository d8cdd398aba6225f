"""HTTP prediction endpoint over a loaded checkpoint and a panel snapshot.

Handlers share one immutable model; the panel is held in a snapshot object
that :meth:`PredictionService.refresh` replaces in a single assignment.
"""

from __future__ import annotations

import gc
import itertools
import json
import logging
import time
from dataclasses import dataclass
from datetime import timedelta
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .ingest import UNASSIGNED, RegionMap, ServiceRequest, assign_region, parse_timestamp
from .panel import Panel, standardize
from .predictor import ServiceTimeModel
from .workload import LlmWorkloadClient, WorkloadScore, score_workload

log = logging.getLogger(__name__)

_snapshot_ids = itertools.count()


@dataclass(frozen=True)
class PanelSnapshot:
    panel: Panel
    key: int


class BadRequest(ValueError):
    def __init__(self, status: int, body: dict):
        super().__init__(body.get("error"))
        self.status = status
        self.body = body


class PredictionService:
    """Transport-independent request handling."""

    def __init__(self, model: ServiceTimeModel, panel: Panel, region_map: RegionMap | None = None,
                 llm_cache: LlmWorkloadClient | None = None):
        self.model = model
        self.region_map = region_map
        self.llm_cache = llm_cache
        self._snapshot = PanelSnapshot(panel, next(_snapshot_ids))
        self.warm()

    def warm(self) -> None:
        """Encode the day after the panel ends, the anchor of same-day live requests."""
        snap = self._snapshot
        if snap.panel.D >= self.model.window:
            self.model._encode(standardize(snap.panel, self.model.panel_stats),
                               np.array([snap.panel.D]), snap.key)

    @property
    def snapshot(self) -> PanelSnapshot:
        return self._snapshot

    def refresh(self, panel: Panel) -> None:
        self._snapshot = PanelSnapshot(panel, next(_snapshot_ids))
        self.warm()

    def _workload(self, description, request_type, created_at) -> WorkloadScore:
        if description and description.strip() and self.llm_cache is not None:
            hit = self.llm_cache.cached(description, created_at)
            if hit is not None:
                return hit
        return score_workload(description, request_type, created_at)

    def parse(self, payload) -> ServiceRequest:
        if not isinstance(payload, dict):
            raise BadRequest(400, {"error": "expected a JSON object"})
        missing = [k for k in ("created_at", "request_type", "longitude", "latitude") if k not in payload]
        if missing:
            raise BadRequest(400, {"error": f"missing fields: {', '.join(missing)}"})
        label = payload["request_type"]
        if label not in self.model.type_vocabulary:
            raise BadRequest(422, {"error": f"unknown request_type {label!r}",
                                   "vocabulary": list(self.model.type_vocabulary)})
        try:
            created = parse_timestamp(str(payload["created_at"]))
            lon, lat = float(payload["longitude"]), float(payload["latitude"])
        except (TypeError, ValueError) as exc:
            raise BadRequest(400, {"error": str(exc)}) from exc
        if created is None:
            raise BadRequest(400, {"error": "created_at is empty"})
        description = payload.get("description")
        if description is not None and not isinstance(description, str):
            raise BadRequest(400, {"error": "description must be a string"})
        region = payload.get("region_id")
        if region is None:
            region = assign_region(lon, lat, self.region_map) if self.region_map else UNASSIGNED
        if not isinstance(region, int) or not 0 <= region < self.model.region_count:
            raise BadRequest(422, {"error": "location is outside every known region"})
        w = self._workload(description, label, created)
        return ServiceRequest("api", created, None, "", label, lon, lat, region, description,
                              workload=w.w)

    def handle(self, payload) -> tuple[int, dict]:
        try:
            req = self.parse(payload)
        except BadRequest as exc:
            return exc.status, exc.body
        snap = self._snapshot  # one read, so a concurrent refresh cannot mix panels
        p = self.model.predict(req, snap.panel, cache_key=snap.key)
        eta = req.created_at + timedelta(days=p.service_time_days)
        return 200, {
            "service_time_days": p.service_time_days,
            "estimated_completion_date": eta.isoformat(),
            "components": {"gpr_mean": p.gpr_mean, "gpr_variance": p.gpr_variance,
                           "workload": p.workload},
            "fallback": p.fallback,
        }

    def health(self) -> dict:
        panel = self._snapshot.panel
        return {"status": "ok", "types": len(self.model.type_vocabulary),
                "regions": self.model.region_count,
                "panel_end": panel.days[-1].isoformat() if panel.D else None}


def make_handler(service: PredictionService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        disable_nagle_algorithm = True  # headers and body go out as separate writes

        def _send(self, status: int, body: dict, elapsed: float | None = None):
            data = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            if elapsed is not None:
                self.send_header("X-Prediction-Ms", f"{1e3 * elapsed:.3f}")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/healthz":
                self._send(200, service.health())
            else:
                self._send(404, {"error": "not found"})

        def do_POST(self):
            if self.path != "/predict":
                self._send(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length)
            try:
                payload = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                self._send(400, {"error": f"malformed JSON: {exc}"})
                return
            t0 = time.perf_counter()
            try:
                status, body = service.handle(payload)
            except Exception as exc:  # keep the server alive, report the failure
                log.exception("prediction failed")
                status, body = HTTPStatus.INTERNAL_SERVER_ERROR, {"error": str(exc)}
            elapsed = time.perf_counter() - t0
            log.debug("predict %.2f ms", 1e3 * elapsed)
            self._send(int(status), body, elapsed)

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

    return Handler


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128


def make_server(service: PredictionService, host: str = "127.0.0.1", port: int = 8311) -> ThreadingHTTPServer:
    """Bound but not yet serving; use ``port=0`` for an ephemeral port.

    Objects alive at this point (model, panel, loaded data) are moved out of the
    collector's reach so full collections stay cheap while requests are served.
    """
    gc.collect()
    gc.freeze()
    return _Server((host, port), make_handler(service))


def serve(service: PredictionService, host: str = "127.0.0.1", port: int = 8311) -> None:
    server = make_server(service, host, port)
    log.info("listening on http://%s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()
