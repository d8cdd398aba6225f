"""Stand up the prediction endpoint and talk to it over HTTP.

    python3 demos/03_serve_and_query.py

Trains a small model on a short simulation, starts the server on a free port
in a background thread, and sends a good request, an unknown type and a
malformed body. The same server runs from the command line with
``servicetime serve --checkpoint model.zip --data panel.npz``.
"""

import json
import threading

import httpx

from servicetime.config import RunConfig, apply_override
from servicetime.evaluation import Experiment
from servicetime.service import PredictionService, make_server
from servicetime.synth import SimConfig, simulate

sim = simulate(SimConfig(horizon_days=120, seed=4))
exp = Experiment.from_dataset(sim.dataset(), 0.8)
config = apply_override(apply_override(RunConfig(), "gpr.use_season", False), "train.epochs", 3)
model = exp.fit(config)

service = PredictionService(model, exp.panel, sim.region_map)
server = make_server(service, port=0)
threading.Thread(target=server.serve_forever, daemon=True).start()
url = "http://%s:%d" % server.server_address[:2]
print("listening on", url, httpx.get(url + "/healthz").json())

r = exp.test_requests[0]
body = {"created_at": r.created_at.isoformat(), "request_type": r.request_type,
        "longitude": r.longitude, "latitude": r.latitude, "description": r.description}
resp = httpx.post(url + "/predict", json=body)
print("\n200 ->", json.dumps(resp.json(), indent=2))
print(f"handled in {resp.headers['X-Prediction-Ms']} ms; actual service time was "
      f"{r.service_time_days:.2f} days")

resp = httpx.post(url + "/predict", json=dict(body, request_type="Pony Rides"))
print("\n", resp.status_code, "->", resp.json())

resp = httpx.post(url + "/predict", content=b"{not json", headers={"Content-Type": "application/json"})
print("\n", resp.status_code, "->", resp.json())

server.shutdown()
server.server_close()
