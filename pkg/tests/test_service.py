import json
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest
import requests

from moefuse.cli import main
from moefuse.service import ServeConfig, create_server

from test_cli import write_config


@pytest.fixture(scope="module")
def served(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("service")
    dirs = []
    for i in range(2):
        out = tmp / f"e{i}"
        assert main(["init-expert", "--out", str(out), "--seed", str(i),
                     "--d-model", "16", "--n-blocks", "2", "--n-heads", "2",
                     "--d-ff", "24"]) == 0
        dirs.append(out)
    write_config(tmp / "cfg.json", dirs, method="btx", k=2)
    model_dir = tmp / "moe"
    assert main(["compose", "--config", str(tmp / "cfg.json"),
                 "--out", str(model_dir)]) == 0
    config = ServeConfig(model_dir=str(model_dir), port=0, max_prompt_bytes=64)
    server = create_server(config)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield base
    server.shutdown()
    server.server_close()


def test_healthz(served):
    r = requests.get(f"{served}/healthz", timeout=5)
    assert r.status_code == 200
    assert r.text == "ok"


def test_model_endpoint_echoes_manifest(served):
    r = requests.get(f"{served}/api/model", timeout=5)
    assert r.status_code == 200
    doc = r.json()
    assert doc["model_kind"] == "btx"
    assert doc["moe"]["num_experts"] == 2


def test_trace_endpoint_schema_valid(served):
    import jsonschema

    r = requests.post(f"{served}/api/trace", json={"prompt": "hi"}, timeout=10)
    assert r.status_code == 200
    doc = r.json()
    schema = json.loads(open("docs/trace.schema.json").read())
    jsonschema.validate(doc, schema)
    assert len(doc["tokens"]) == 3  # BOS + 2 bytes


def test_trace_endpoint_respects_filters(served):
    r = requests.post(f"{served}/api/trace",
                      json={"prompt": "hi", "blocks": [0], "projections": ["gate"]},
                      timeout=10)
    doc = r.json()
    assert all(s["site_count"] == 1 for s in doc["summaries"])
    assert doc["model"]["filter"] == {"blocks": [0], "projections": ["gate"]}


def test_concurrent_identical_requests_identical_bodies(served):
    def fetch(_):
        return requests.post(f"{served}/api/trace",
                             json={"prompt": "concurrency", "max_new": 2},
                             timeout=30).text

    with ThreadPoolExecutor(max_workers=10) as pool:
        bodies = list(pool.map(fetch, range(10)))
    assert len(set(bodies)) == 1


def test_invalid_body_is_400(served):
    r = requests.post(f"{served}/api/trace", data=b"not json",
                      headers={"Content-Type": "application/json"}, timeout=5)
    assert r.status_code == 400
    r = requests.post(f"{served}/api/trace", json={"prompt": 5}, timeout=5)
    assert r.status_code == 400
    r = requests.post(f"{served}/api/trace", json={"prompt": "x", "max_new": -1},
                      timeout=5)
    assert r.status_code == 400
    r = requests.post(f"{served}/api/trace", json={"prompt": "x", "blocks": ["a"]},
                      timeout=5)
    assert r.status_code == 400


def test_oversized_prompt_is_413(served):
    r = requests.post(f"{served}/api/trace", json={"prompt": "x" * 100}, timeout=5)
    assert r.status_code == 413


def test_experts_endpoint_tracks_recent_requests(served):
    requests.post(f"{served}/api/trace", json={"prompt": "abc"}, timeout=10)
    r = requests.get(f"{served}/api/experts", timeout=5)
    assert r.status_code == 200
    doc = r.json()
    assert doc["expert_names"] == ["e0", "e1"]
    assert doc["requests"] >= 1
    assert abs(sum(doc["top1_fraction"]) - 1.0) <= 1e-9


def test_bts_model_trace_is_422(tmp_path):
    dirs = []
    for i in range(2):
        out = tmp_path / f"e{i}"
        assert main(["init-expert", "--out", str(out), "--seed", str(i)]) == 0
        dirs.append(out)
    write_config(tmp_path / "cfg.json", dirs, method="bts", k=1, stitch_freq=1)
    model_dir = tmp_path / "bts"
    assert main(["compose", "--config", str(tmp_path / "cfg.json"),
                 "--out", str(model_dir)]) == 0
    server = create_server(ServeConfig(model_dir=str(model_dir), port=0))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        base = f"http://127.0.0.1:{server.server_address[1]}"
        r = requests.post(f"{base}/api/trace", json={"prompt": "hi"}, timeout=10)
        assert r.status_code == 422
        r = requests.get(f"{base}/api/model", timeout=5)
        assert r.json()["model_kind"] == "bts"
    finally:
        server.shutdown()
        server.server_close()


def test_static_file_serving(tmp_path):
    static = tmp_path / "static"
    static.mkdir()
    (static / "index.html").write_text("<html><body>viz</body></html>")
    out = tmp_path / "e0"
    assert main(["init-expert", "--out", str(out), "--seed", "0"]) == 0
    write_config(tmp_path / "cfg.json", [out, out], method="btx", k=1)
    model_dir = tmp_path / "m"
    assert main(["compose", "--config", str(tmp_path / "cfg.json"),
                 "--out", str(model_dir)]) == 0
    server = create_server(ServeConfig(model_dir=str(model_dir), port=0,
                                       static_dir=str(static)))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        base = f"http://127.0.0.1:{server.server_address[1]}"
        r = requests.get(f"{base}/", timeout=5)
        assert r.status_code == 200 and "viz" in r.text
        r = requests.get(f"{base}/../etc/passwd", timeout=5)
        assert r.status_code == 404
    finally:
        server.shutdown()
        server.server_close()
