"""
Inference service tests, run against Flask's test client.
"""

import io

import numpy as np
import pytest
import requests

import request_tools
import server
from binary_protocol import binary_to_dict, dict_to_binary
from conftest import make_scene, random_boxes
from net import build_model, save_model
from pipeline import infer_scene
from request_tools import request_hat_inference, scene_to_payload


@pytest.fixture
def client(small_config):
    server.configure(None, small_config)
    server.app.config['TESTING'] = True
    with server.app.test_client() as c:
        yield c
    server.configure(None, small_config)


@pytest.fixture
def checkpoint(small_config, tmp_path):
    path = str(tmp_path / "model.pt")
    save_model(build_model(small_config.arch, seed=5), path)
    return path


@pytest.fixture
def scene(rng):
    return make_scene("req-1", 128, 96, points=[(5, 5)], boxes=random_boxes(rng, 25, 128, 96))


def upload(client, path, name="model.pt"):
    with open(path, "rb") as fh:
        data = {"file": (io.BytesIO(fh.read()), name)}
    return client.post('/update_model', data=data, content_type='multipart/form-data')


def test_health_reports_model_state(client, checkpoint):
    assert client.get('/health').get_json() == {"status": "ok", "model_loaded": False}
    assert upload(client, checkpoint).status_code == 200
    assert client.get('/health').get_json()["model_loaded"] is True


def test_infer_without_model_is_503(client, scene):
    resp = client.post('/infer', data=dict_to_binary(scene_to_payload(scene)))
    assert resp.status_code == 503
    assert binary_to_dict(resp.data) == {"status": "error", "message": "Service not ready"}


def test_served_inference_matches_pipeline(client, checkpoint, scene, small_config):
    upload(client, checkpoint)
    resp = client.post('/infer', data=dict_to_binary(scene_to_payload(scene)),
                       content_type='application/octet-stream')
    assert resp.status_code == 200
    result = binary_to_dict(resp.data)
    expected = infer_scene(scene, server.model, small_config.compression, small_config.nms.conf_floor)
    assert result["status"] == "ok" and result["id"] == "req-1"
    np.testing.assert_array_equal(result["boxes"], expected.boxes)
    np.testing.assert_array_equal(result["thresholds"], expected.thresholds)
    assert (result["n_hat"], result["n_c"], result["n_final"]) == (expected.n_hat, expected.n_c, expected.n_final)


def test_payload_never_carries_points(scene):
    assert "points" not in scene_to_payload(scene)


@pytest.mark.parametrize("payload", [
    {"width": 128, "height": 96},
    {"width": 128, "height": 96, "boxes": np.zeros((3, 4))},
    {"width": 0, "height": 96, "boxes": np.zeros((0, 5))},
    {"width": 128, "height": 96, "boxes": np.array([[1.0, 1.0, -1.0, 1.0, 0.0]])},
    ["not", "a", "dict"],
])
def test_malformed_payload_is_400(client, checkpoint, payload):
    upload(client, checkpoint)
    resp = client.post('/infer', data=dict_to_binary(payload))
    assert resp.status_code == 400
    assert binary_to_dict(resp.data)["status"] == "error"


def test_payload_is_clamped_like_scene_files():
    scene = server.scene_from_payload({"id": "edge", "width": 128, "height": 96,
                                       "boxes": np.array([[150.0, -3.0, 10.0, 10.0, 0.5]]),
                                       "points": [(1.0, 1.0)]})
    assert (scene.boxes[0].cx, scene.boxes[0].cy) == (128.0, 0.0)
    assert scene.count == 0
    assert scene.proposals is None


def test_clamped_request_matches_clamped_scene(client, checkpoint, small_config):
    upload(client, checkpoint)
    payload = {"id": "edge", "width": 128, "height": 96,
               "boxes": np.array([[140.0, 50.0, 10.0, 10.0, 1.0], [-5.0, 100.0, 8.0, 8.0, 0.2]])}
    result = binary_to_dict(client.post('/infer', data=dict_to_binary(payload)).data)
    clamped = make_scene("edge", 128, 96, boxes=[(128.0, 50.0, 10.0, 10.0, 1.0), (0.0, 96.0, 8.0, 8.0, 0.2)])
    expected = infer_scene(clamped, server.model, small_config.compression, small_config.nms.conf_floor)
    np.testing.assert_array_equal(result["boxes"], expected.boxes)
    assert result["n_final"] == expected.n_final


def test_garbage_body_is_400(client, checkpoint):
    upload(client, checkpoint)
    assert client.post('/infer', data=b"\x00garbage").status_code == 400


def test_update_model_rejects_bad_uploads(client, tmp_path, small_config):
    assert client.post('/update_model', data={}, content_type='multipart/form-data').status_code == 400
    wrong_ext = tmp_path / "model.tar"
    wrong_ext.write_bytes(b"x")
    assert upload(client, str(wrong_ext), "model.tar").status_code == 400
    corrupt = tmp_path / "corrupt.pt"
    corrupt.write_bytes(b"not torch")
    assert upload(client, str(corrupt)).status_code == 400

    other = small_config.arch
    other_path = str(tmp_path / "other.pt")
    mismatched = build_model(type(other)(**{**other.__dict__, "S": 16, "K": 2}))
    save_model(mismatched, other_path)
    resp = upload(client, other_path)
    assert resp.status_code == 400
    assert "S=16" in resp.get_json()["message"]
    assert server.model is None


class FakeResponse:
    def __init__(self, status_code, payload):
        self.status_code = status_code
        self.content = dict_to_binary(payload)
        self.text = str(payload)


def test_client_retries_transport_errors(monkeypatch, scene):
    calls = []

    def flaky_post(url, data, headers, timeout):
        calls.append(url)
        if len(calls) < 3:
            raise requests.exceptions.ConnectionError("refused")
        return FakeResponse(200, {"status": "ok", "n_final": 4})

    monkeypatch.setattr(request_tools.requests, "post", flaky_post)
    result = request_hat_inference(scene, "http://test/infer", max_retries=3, retry_delay=0.0)
    assert result["n_final"] == 4
    assert len(calls) == 3
    assert "points" not in binary_to_dict(dict_to_binary(scene_to_payload(scene)))


def test_client_gives_up_after_retries(monkeypatch, scene):
    def down(url, data, headers, timeout):
        raise requests.exceptions.Timeout("slow")

    monkeypatch.setattr(request_tools.requests, "post", down)
    with pytest.raises(RuntimeError, match="Failed after 3 attempts"):
        request_hat_inference(scene, "http://test/infer", max_retries=2, retry_delay=0.0)


def test_client_does_not_retry_bad_requests(monkeypatch, scene):
    calls = []

    def reject(url, data, headers, timeout):
        calls.append(url)
        return FakeResponse(400, {"status": "error", "message": "malformed request"})

    monkeypatch.setattr(request_tools.requests, "post", reject)
    with pytest.raises(RuntimeError, match="malformed request"):
        request_hat_inference(scene, "http://test/infer", max_retries=3, retry_delay=0.0)
    assert len(calls) == 1
