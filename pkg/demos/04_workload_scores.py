"""How request descriptions become a workload score in [0, 10].

    python3 demos/04_workload_scores.py

Offline, a counting heuristic scores the text. With an LLM endpoint the
prompt in ``servicetime/prompts/workload.txt`` is sent instead and replies are
cached on disk, so re-scoring the same corpus costs nothing. Here a fake
endpoint stands in for the model so the demo runs without a network.
"""

import tempfile
from pathlib import Path

import httpx

from servicetime.workload import LlmClientConfig, LlmWorkloadClient, score_workload

for text in [None, "", "sofa", "2 mattresses, 1 fridge", "3 tires and a couch; 10 bags of leaves",
             "40 boxes, 12 chairs, 9 tables"]:
    s = score_workload(text)
    print(f"{text!r:45} -> {s.w:4.1f} ({s.source})")


def fake_llm(request):
    prompt = request.read().decode()
    return httpx.Response(200, json={"choices": [{"message": {
        "content": f"{min(10, len(prompt) % 11)}\nlooks like a single truck run"}}]})


with tempfile.TemporaryDirectory() as tmp:
    cfg = LlmClientConfig(cache_path=str(Path(tmp) / "cache.jsonl"))
    for run in (1, 2):
        client = LlmWorkloadClient(cfg, transport=httpx.MockTransport(fake_llm))
        w = [client.score(t, "Bulk Trash", None).w for t in ("sofa", "2 mattresses, 1 fridge", "sofa")]
        print(f"run {run}: scores {w}, network calls {client.network_calls}")
        client.close()
