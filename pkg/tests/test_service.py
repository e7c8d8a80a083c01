import io

import pytest
from fastapi.testclient import TestClient

from fticir.service import ServiceState, create_app


@pytest.fixture(scope="module")
def app_state(trained_run):
    run = trained_run
    return ServiceState.load(
        cfg={},
        index_path=run["index_path"],
        image_dir=run["root"] / "images",
        checkpoint_path=run["checkpoint"],
    )


@pytest.fixture(scope="module")
def client(app_state):
    return TestClient(create_app(app_state))


def upload_bytes(trained_run):
    path = trained_run["root"] / "images" / "img_000.png"
    return path.read_bytes()


def test_health(client, trained_run):
    res = client.get("/health")
    assert res.status_code == 200
    body = res.json()
    assert body["status"] == "ok"
    assert body["index_size"] == len(trained_run["index"].ids)
    assert body["backbone"] == "toy"
    assert len(body["config_hash"]) == 16


def test_health_before_initialization():
    bare = TestClient(create_app(None))
    res = bare.get("/health")
    assert res.status_code == 503
    assert "error" in res.json()


def test_search_with_reference_id(client):
    res = client.post("/search", json={
        "reference_id": "img_001",
        "modification": "make it red",
        "top_k": 5,
    })
    assert res.status_code == 200
    body = res.json()
    assert len(body["results"]) == 5
    for item in body["results"]:
        assert item["image_url"] == f"/images/{item['id']}"
        # Scores are rounded for transport.
        assert item["score"] == round(item["score"], 6)
    scores = [item["score"] for item in body["results"]]
    assert scores == sorted(scores, reverse=True)
    echo = body["query_echo"]
    assert echo["reference_id"] == "img_001"
    assert echo["uploaded"] is False
    assert body["timing_ms"] >= 0.0


def test_search_with_upload(client, trained_run):
    before = client.get("/health").json()["index_size"]
    res = client.post(
        "/search",
        data={"modification": "a small one", "top_k": "3"},
        files={"image_upload": ("ref.png", io.BytesIO(upload_bytes(trained_run)),
                                "image/png")},
    )
    assert res.status_code == 200
    body = res.json()
    assert len(body["results"]) == 3
    assert body["query_echo"]["uploaded"] is True
    # Uploads are queries, never additions to the index.
    assert client.get("/health").json()["index_size"] == before


def test_search_upload_matches_reference_id(client, trained_run):
    by_id = client.post("/search", json={
        "reference_id": "img_000",
        "modification": "the same but larger",
        "top_k": 6,
    }).json()
    by_upload = client.post(
        "/search",
        data={"modification": "the same but larger", "top_k": "6"},
        files={"image_upload": ("r.png", io.BytesIO(upload_bytes(trained_run)),
                                "image/png")},
    ).json()
    assert [r["id"] for r in by_id["results"]] \
        == [r["id"] for r in by_upload["results"]]


def test_search_input_errors(client, trained_run):
    no_ref = client.post("/search", json={"modification": "x"})
    assert no_ref.status_code == 400
    both = client.post(
        "/search",
        data={"reference_id": "img_000", "modification": "x"},
        files={"image_upload": ("r.png", io.BytesIO(upload_bytes(trained_run)),
                                "image/png")},
    )
    assert both.status_code == 400
    empty_mod = client.post("/search", json={
        "reference_id": "img_000", "modification": "   ",
    })
    assert empty_mod.status_code == 400
    bad_k = client.post("/search", json={
        "reference_id": "img_000", "modification": "x", "top_k": 0,
    })
    assert bad_k.status_code == 400
    unknown = client.post("/search", json={
        "reference_id": "img_999", "modification": "x",
    })
    assert unknown.status_code == 404
    assert "img_999" in unknown.json()["error"]
    garbage = client.post(
        "/search",
        data={"modification": "x"},
        files={"image_upload": ("r.png", io.BytesIO(b"not an image"),
                                "image/png")},
    )
    assert garbage.status_code == 400


def test_search_default_top_k(client, trained_run):
    res = client.post("/search", json={
        "reference_id": "img_002", "modification": "whatever",
    })
    assert res.status_code == 200
    expect = min(20, len(trained_run["index"].ids))
    assert len(res.json()["results"]) == expect


def test_oversized_upload_rejected(trained_run):
    state = ServiceState.load(
        cfg={"service.max_upload_mb": "1"},
        index_path=trained_run["index_path"],
        image_dir=trained_run["root"] / "images",
        checkpoint_path=trained_run["checkpoint"],
    )
    client = TestClient(create_app(state))
    blob = b"\x00" * (1024 * 1024 + 1)
    res = client.post(
        "/search",
        data={"modification": "x"},
        files={"image_upload": ("big.png", io.BytesIO(blob), "image/png")},
    )
    assert res.status_code == 413


def test_image_endpoint(client):
    res = client.get("/images/img_003")
    assert res.status_code == 200
    assert res.headers["content-type"] == "image/png"
    assert res.content[:8] == b"\x89PNG\r\n\x1a\n"
    missing = client.get("/images/not_there")
    assert missing.status_code == 404
    assert "not_there" in missing.json()["error"]


def test_cors_headers_present(client):
    res = client.get("/health", headers={"Origin": "http://localhost:5173"})
    assert res.headers.get("access-control-allow-origin") in ("*", "http://localhost:5173")


def test_search_results_match_cli(client, trained_run, capsys):
    from fticir.cli import main

    queries = [("img_000", "make it red"), ("img_004", "move it to the corner"),
               ("img_007", "two of them")]
    for ref, mod in queries:
        code = main([
            "search",
            "--index", str(trained_run["index_path"]),
            "--checkpoint", str(trained_run["checkpoint"]),
            "--images", str(trained_run["root"] / "images"),
            "--reference", ref,
            "--modification", mod,
            "--top-k", "8",
        ])
        assert code == 0
        cli_ids = [line.split("\t")[1]
                   for line in capsys.readouterr().out.strip().splitlines()]
        res = client.post("/search", json={
            "reference_id": ref, "modification": mod, "top_k": 8,
        })
        service_ids = [item["id"] for item in res.json()["results"]]
        assert cli_ids == service_ids, (ref, mod)
