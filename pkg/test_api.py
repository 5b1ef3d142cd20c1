"""
Archive API checks against an in-memory database.
Run with: pytest test_api.py
"""

import os

os.environ["DATABASE_URL"] = "sqlite://"

import pytest  # noqa: E402

import app as archive  # noqa: E402
import run_experiment  # noqa: E402
from precoders.experiment import ExperimentSpec, ResultRow  # noqa: E402


def _row(trial=0, method="rcg", bsc=1, power_dbm=20.0, wsr=3.0, status="ok", **kw):
    row = {
        "trial": trial, "seed": 2 ** 64 - 1 - trial, "power_dbm": power_dbm, "bsc": bsc, "method": method,
        "outer_iter": 12 if method == "rcg" else 0, "wsr_bits": wsr, "grad_norm": 1e-7,
        "inner_iters": 20 if method == "rcg" else 0, "wall_ms": 0.0, "status": status,
    }
    row.update(kw)
    return row


def _payload(run_id="run-1", rows=None):
    return {
        "run": {"run_id": run_id, "seed": 7, "trials": 2, "config": {"num_bs": 3, "bsc": [1, 2]}},
        "rows": rows if rows is not None else [
            _row(0, "rcg", wsr=4.0), _row(1, "rcg", wsr=6.0),
            _row(0, "mrt", wsr=2.0), _row(1, "mrt", wsr=3.0),
            _row(0, "zf", bsc=2, wsr=None, status="BaselineInfeasibleError"),
        ],
    }


@pytest.fixture
def client():
    with archive.app.app_context():
        archive.db.drop_all()
        archive.db.create_all()
    archive.app.config["TESTING"] = True
    with archive.app.test_client() as c:
        yield c


def test_health(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    assert resp.get_json()["status"] == "healthy"


def test_bulk_upload_stores_run_and_rows(client):
    resp = client.post("/api/admin/results/bulk", json=_payload())
    assert resp.status_code == 200
    body = resp.get_json()
    assert (body["rows_processed"], body["rows_added"], body["rows_skipped"]) == (5, 5, 0)

    runs = client.get("/api/runs").get_json()
    assert runs["count"] == 1
    run = runs["runs"][0]
    assert run["run_id"] == "run-1"
    assert run["seed"] == "7"
    assert run["config"] == {"num_bs": 3, "bsc": [1, 2]}
    assert run["result_count"] == 5


def test_results_keep_u64_seeds_and_filter(client):
    client.post("/api/admin/results/bulk", json=_payload())
    rows = client.get("/api/runs/run-1/results").get_json()["results"]
    assert rows[0]["seed"] == str(2 ** 64 - 1)

    def count(query):
        return client.get(f"/api/runs/run-1/results?{query}").get_json()["count"]

    assert count("method=RCG") == 2
    assert count("bsc=2") == 1
    assert count("power_dbm=20") == 5
    assert count("power_dbm=30") == 0
    assert count("status=BaselineInfeasibleError") == 1
    assert count("limit=3") == 3
    assert count("limit=0") == 1


def test_summary_averages_ok_rows(client):
    client.post("/api/admin/results/bulk", json=_payload())
    body = client.get("/api/runs/run-1/summary").get_json()
    cells = {(s["bsc"], s["method"]): s for s in body["summary"]}
    assert set(cells) == {(1, "mrt"), (1, "rcg")}
    assert cells[(1, "rcg")]["ok_trials"] == 2
    assert cells[(1, "rcg")]["mean_wsr_bits"] == pytest.approx(5.0)
    assert cells[(1, "rcg")]["mean_outer_iter"] == pytest.approx(12.0)
    assert cells[(1, "mrt")]["mean_wsr_bits"] == pytest.approx(2.5)


def test_unknown_run_is_404(client):
    assert client.get("/api/runs/nope/results").status_code == 404
    assert client.get("/api/runs/nope/summary").status_code == 404


@pytest.mark.parametrize("payload", [
    None,
    {"rows": []},
    {"run": {"run_id": "x"}, "rows": "not-a-list"},
    {"run": {"run_id": ""}, "rows": []},
    {"run": {"run_id": "x" * 65}, "rows": []},
])
def test_bulk_rejects_malformed_payloads(client, payload):
    resp = client.post("/api/admin/results/bulk", json=payload)
    assert resp.status_code == 400
    assert "error" in resp.get_json()


def test_bulk_skips_invalid_rows(client):
    rows = [
        _row(0),
        _row(1, method="wmmse"),
        _row(2, wsr=None),
        _row(3, wsr=-1.0),
        {"trial": 4, "method": "mrt"},
        "not-a-row",
        _row(5, seed="five"),
    ]
    body = client.post("/api/admin/results/bulk", json=_payload(rows=rows)).get_json()
    assert body["rows_added"] == 1
    assert body["rows_skipped"] == 6
    assert body["errors"][0].startswith("row 1:")
    assert client.get("/api/runs/run-1/results").get_json()["count"] == 1


def test_reupload_replaces_rows(client):
    client.post("/api/admin/results/bulk", json=_payload())
    client.post("/api/admin/results/bulk", json=_payload(rows=[_row(0, wsr=9.0)]))
    runs = client.get("/api/runs").get_json()
    assert runs["count"] == 1
    rows = client.get("/api/runs/run-1/results").get_json()["results"]
    assert [r["wsr_bits"] for r in rows] == [9.0]


def test_cleanup_deletes_old_runs_with_their_rows(client):
    client.post("/api/admin/results/bulk", json=_payload())
    assert client.post("/api/admin/runs/cleanup").get_json()["deleted_count"] == 0
    assert client.post("/api/admin/runs/cleanup?days=0").get_json()["deleted_count"] == 1
    assert client.get("/api/runs").get_json()["count"] == 0
    with archive.app.app_context():
        assert archive.Result.query.count() == 0


def test_cli_upload_lands_in_archive(client, monkeypatch):
    class Relay:
        def __init__(self, resp):
            self.status_code = resp.status_code
            self.text = resp.get_data(as_text=True)
            self._body = resp.get_json()

        def json(self):
            return self._body

    def relay_post(url, json, timeout):
        return Relay(client.post(url.split("127.0.0.1:5000", 1)[1], json=json))

    monkeypatch.setattr(run_experiment.requests, "post", relay_post)
    spec = ExperimentSpec(num_bs=2, num_ut=2, mt=2, mr=1, streams=1, power_dbm=(20.0,), bsc=(1,), trials=1)
    rows = [ResultRow(0, 2 ** 63, 20.0, 1, "rcg", outer_iter=4, wsr_bits=1.25, grad_norm=1e-3, inner_iters=6)]
    assert run_experiment.upload_results("cli-run", spec, rows, run_experiment.LOCAL_ARCHIVE_URL)

    run = client.get("/api/runs").get_json()["runs"][0]
    assert run["run_id"] == "cli-run"
    assert run["config"]["bsc"] == [1]
    stored = client.get("/api/runs/cli-run/results").get_json()["results"]
    assert stored[0]["seed"] == str(2 ** 63)
    assert stored[0]["wsr_bits"] == 1.25


def test_bulk_coerces_or_rejects_trial_counts(client):
    payload = _payload()
    payload["run"]["trials"] = "many"
    resp = client.post("/api/admin/results/bulk", json=payload)
    assert resp.status_code == 400
    assert "run.trials" in resp.get_json()["error"]
    assert client.get("/api/runs").get_json()["count"] == 0

    payload["run"]["trials"] = "3"
    assert client.post("/api/admin/results/bulk", json=payload).status_code == 200
    assert client.get("/api/runs").get_json()["runs"][0]["trials"] == 3
