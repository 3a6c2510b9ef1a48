"""Real-socket coverage: the threaded server must behave exactly like the
in-process application."""

import json
import threading

import httpx
import pytest

from ami.webapp import AmiHttpServer
from test_ingest_api import GOOD_BODY, PASSWORDS, make_app


@pytest.fixture
def server():
    app = make_app()
    srv = AmiHttpServer(app, "127.0.0.1", 0).start_background()
    yield srv
    srv.shutdown()


@pytest.fixture
def client(server):
    with httpx.Client(base_url=server.url, timeout=10.0) as c:
        yield c


def login(client, user="alice"):
    response = client.post("/api/login",
                           json={"username": user, "password": PASSWORDS[user]})
    assert response.status_code == 200
    return {"Authorization": f"Bearer {response.json()['token']}"}


class TestOverSockets:
    def test_ingest_roundtrip(self, server, client):
        response = client.post("/sensor_data/", json=GOOD_BODY)
        assert response.status_code == 201
        assert response.json() == {"stored_id": 1, "warnings": []}
        assert len(server.app.readings) == 1

    def test_login_and_recent(self, server, client):
        client.post("/sensor_data/", json=GOOD_BODY)
        headers = login(client)
        response = client.get("/api/readings/recent?limit=1", headers=headers)
        assert response.status_code == 200
        [reading] = response.json()["readings"]
        assert reading["temperature"] == 21.5

    def test_export_bytes_match_core(self, server, client):
        client.post("/sensor_data/", json=GOOD_BODY)
        headers = login(client)
        response = client.get("/api/export.csv", headers=headers)
        from ami.timeseries import FULL_RANGE
        assert response.content == server.app.readings.export_csv(FULL_RANGE)

    def test_chat_turn(self, server, client):
        client.post("/sensor_data/", json=GOOD_BODY)
        headers = login(client)
        response = client.post("/api/chat", headers=headers,
                               json={"message": "how is the air quality?"})
        assert response.status_code == 200
        payload = response.json()
        assert "21.5" in payload["reply"]
        assert payload["tool_calls"][0]["tool_name"] == "get_recent_sensor_data"

    def test_mcp_http_equals_direct_payload(self, server, client):
        headers = login(client)
        request = b'{"jsonrpc":"2.0","id":7,"method":"tools/list"}'
        response = client.post("/mcp", headers=headers, content=request)
        assert response.status_code == 200
        direct = server.app.mcp.handle_message(request, "alice")
        assert response.content == direct

    def test_mcp_notification_202(self, server, client):
        headers = login(client)
        response = client.post("/mcp", headers=headers,
                               content=b'{"jsonrpc":"2.0","method":"tools/list"}')
        assert response.status_code == 202
        assert response.content == b""

    def test_unauthenticated_mcp_401(self, server, client):
        response = client.post("/mcp", content=b'{"jsonrpc":"2.0","id":1,"method":"tools/list"}')
        assert response.status_code == 401

    def test_concurrent_mixed_requests(self, server, client):
        headers = login(client)
        errors = []

        def ingest(i):
            try:
                with httpx.Client(base_url=server.url, timeout=10.0) as c:
                    body = dict(GOOD_BODY, device_id=f"d{i}")
                    assert c.post("/sensor_data/", json=body).status_code == 201
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        def read(i):
            try:
                with httpx.Client(base_url=server.url, timeout=10.0) as c:
                    assert c.get("/api/readings/recent?limit=5",
                                 headers=headers).status_code == 200
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=ingest, args=(i,)) for i in range(6)] + \
                  [threading.Thread(target=read, args=(i,)) for i in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert len(server.app.readings) == 6

    def test_keepalive_multiple_requests_one_connection(self, server, client):
        for i in range(3):
            assert client.post("/sensor_data/",
                               json=dict(GOOD_BODY, device_id=f"k{i}")).status_code == 201
