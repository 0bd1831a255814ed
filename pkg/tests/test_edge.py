import base64
import json
import urllib.error
import urllib.request
from threading import Thread

import pytest

from ambientd.edge import (ActuatorCommand, EdgeService, MetricsRecord,
                           RegionConfig, SensorReading)
from ambientd.errors import (BadRequestError, NotFoundError, StaleReadingError)
from ambientd.httpapi import make_server
from ambientd.scene import MarkerSpec, Region, TextureSpec, render_region


def image_b64(lux=80.0, seed=1, texture=None):
    region = Region("r", texture or TextureSpec("checkerboard", cell=32,
                                                low=0.1, high=0.9), lux)
    img = render_region(region, seed, 320, 240)
    return base64.b64encode(img.to_pgm()).decode("ascii")


def reading(ts, lux=80.0, with_image=True, sensor="s1", region="r1", seed=1):
    return SensorReading(
        sensor_id=sensor, region_id=region, timestamp_ms=ts, lux=lux,
        image_pgm_b64=image_b64(lux=lux, seed=seed) if with_image else None)


@pytest.fixture
def service(tmp_path):
    svc = EdgeService(tmp_path)
    svc.register_region(RegionConfig("r1", bulb_actuator="bulb1"))
    svc.register_actuator("bulb1", lambda cmd: None)
    return svc


class TestIngestion:
    def test_image_reading_produces_record(self, service):
        record = service.ingest_reading(reading(1000))
        assert record.region_id == "r1"
        assert record.metrics.corner_count > 0
        assert record.metrics.illuminance == 80.0
        assert service.get_latest_metrics("r1") is record

    def test_lux_only_carries_forward_image_metrics(self, service):
        first = service.ingest_reading(reading(1000))
        second = service.ingest_reading(reading(2000, lux=120.0,
                                                with_image=False))
        assert second.metrics.brightness == first.metrics.brightness
        assert second.metrics.corner_count == first.metrics.corner_count
        assert second.metrics.illuminance == 120.0

    def test_reading_without_payload_rejected(self):
        with pytest.raises(BadRequestError):
            SensorReading("s1", "r1", 1000)

    def test_stale_timestamp_rejected(self, service):
        service.ingest_reading(reading(2000))
        with pytest.raises(StaleReadingError):
            service.ingest_reading(reading(2000, seed=2))
        with pytest.raises(StaleReadingError):
            service.ingest_reading(reading(1500, seed=3))

    def test_staleness_tracked_per_sensor(self, service):
        service.ingest_reading(reading(2000, sensor="s1"))
        service.ingest_reading(reading(1000, sensor="s2", seed=2))

    def test_unknown_region(self, service):
        with pytest.raises(NotFoundError):
            service.ingest_reading(reading(1000, region="nope"))

    def test_corrupt_image_rejected(self, service):
        bad = base64.b64encode(b"P5 not really").decode("ascii")
        with pytest.raises(BadRequestError):
            service.ingest_reading(SensorReading("s1", "r1", 1000,
                                                 image_pgm_b64=bad))


class TestPolicyStepping:
    def test_bulb_command_issued_when_off_target(self, tmp_path):
        accepted = []
        svc = EdgeService(tmp_path)
        svc.register_region(RegionConfig("r1", bulb_actuator="bulb1"))
        svc.register_actuator("bulb1", accepted.append)
        # 200 lux keeps sensor noise low enough for a stable Coarse reading
        svc.ingest_reading(reading(1000, lux=200.0))
        assert len(accepted) == 1
        assert accepted[0].kind == "set-brightness"
        assert accepted[0].payload == pytest.approx(29.2929, abs=1e-3)

    def test_no_command_inside_deadband(self, tmp_path):
        accepted = []
        svc = EdgeService(tmp_path)
        svc.register_region(RegionConfig("r1", bulb_actuator="bulb1"))
        svc.register_actuator("bulb1", accepted.append)
        svc.ingest_reading(reading(1000, lux=295.0))
        assert accepted == []

    def test_constraints_cap_the_target(self, tmp_path):
        accepted = []
        svc = EdgeService(tmp_path)
        from ambientd.policy import ControlConstraint, DEFAULT_CALIBRATION_CURVE
        cap = ControlConstraint("energy", 50.0, 200.0, 150.0, priority=1)
        svc.register_region(RegionConfig("r1", bulb_actuator="bulb1",
                                         constraints=[cap]))
        svc.register_actuator("bulb1", accepted.append)
        svc.ingest_reading(reading(1000, lux=80.0))
        assert len(accepted) == 1
        want, _ = DEFAULT_CALIBRATION_CURVE.invert(200.0)
        assert accepted[0].payload == pytest.approx(want)

    def test_marker_mode_drives_eink(self, tmp_path):
        accepted = []
        svc = EdgeService(tmp_path)
        svc.register_region(RegionConfig(
            "r1", mode="marker", bulb_actuator="bulb1", eink_actuator="eink1",
            initial_marker=MarkerSpec("binary-grid-A", 0)))
        svc.register_actuator("bulb1", accepted.append)
        svc.register_actuator("eink1", accepted.append)
        # flat background with no marker -> 0% match -> light escalation first
        svc.ingest_reading(reading(1000, lux=80.0))
        assert svc.marker_phase("r1") == "AdjustLight"
        assert accepted and accepted[0].kind == "set-brightness"

    def test_marker_phase_none_for_markerless(self, service):
        assert service.marker_phase("r1") is None


class TestTrend:
    def test_window_and_stats(self, service):
        for i, lux in enumerate((80.0, 100.0, 120.0)):
            service.ingest_reading(reading(1000 * (i + 1), lux=lux, seed=1))
        trend = service.get_trend("r1", 1.5)
        assert trend.count == 2  # 1.5 s window ending at the newest record
        assert trend.stats["illuminance"] == {"min": 100.0, "mean": 110.0,
                                              "max": 120.0}
        wide = service.get_trend("r1", 10.0)
        assert wide.count == 3
        assert wide.stats["illuminance"]["min"] == 80.0

    def test_change_events_counted(self, tmp_path):
        svc = EdgeService(tmp_path)
        svc.register_region(RegionConfig("r1"))
        svc.ingest_reading(reading(1000, lux=80.0))
        bright = image_b64(lux=400.0, seed=2)
        svc.ingest_reading(SensorReading("s1", "r1", 2000, lux=400.0,
                                         image_pgm_b64=bright))
        trend = svc.get_trend("r1", 10.0)
        assert trend.change_events >= 1

    def test_bad_window_rejected(self, service):
        service.ingest_reading(reading(1000))
        with pytest.raises(BadRequestError):
            service.get_trend("r1", 0.0)

    def test_empty_region_not_found(self, service):
        with pytest.raises(NotFoundError):
            service.get_latest_metrics("r1")
        with pytest.raises(NotFoundError):
            service.get_trend("r1", 10.0)


class TestDurability:
    def test_restart_replays_log(self, tmp_path):
        svc = EdgeService(tmp_path)
        svc.register_region(RegionConfig("r1"))
        for i in range(3):
            svc.ingest_reading(reading(1000 * (i + 1), lux=80.0 + i, seed=i + 1))
        latest = svc.get_latest_metrics("r1").to_json()

        svc2 = EdgeService(tmp_path)
        svc2.register_region(RegionConfig("r1"))
        assert svc2.get_latest_metrics("r1").to_json() == latest
        assert svc2.get_trend("r1", 60.0).count == 3

    def test_json_round_trip_is_bit_exact(self, service):
        record = service.ingest_reading(reading(1000))
        doc = json.loads(json.dumps(record.to_json()))
        back = MetricsRecord.from_json(doc)
        assert back == record

    def test_command_json_round_trip(self):
        cmd = ActuatorCommand("eink1", "set-marker",
                              MarkerSpec("image-uniform", 2), 1234)
        back = ActuatorCommand.from_json("eink1",
                                         json.loads(json.dumps(cmd.to_json())))
        assert back == cmd


class TestDispatch:
    def test_unknown_actuator(self, service):
        with pytest.raises(NotFoundError):
            service.dispatch_command(ActuatorCommand("nope", "set-brightness",
                                                     50.0))

    def test_latency_measured(self, service):
        latency = service.dispatch_command(
            ActuatorCommand("bulb1", "set-brightness", 50.0))
        assert 0.0 <= latency < 500.0

    def test_bad_kind_rejected(self):
        with pytest.raises(BadRequestError):
            ActuatorCommand("bulb1", "warp-speed", 50.0)
        with pytest.raises(BadRequestError):
            ActuatorCommand("bulb1", "set-marker", 50.0)


@pytest.fixture
def http_server(service):
    server = make_server(service)
    thread = Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()
    server.server_close()


def http(method, url, doc=None):
    data = json.dumps(doc).encode() if doc is not None else None
    req = urllib.request.Request(url, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read())


class TestHttpApi:
    def test_health(self, http_server):
        status, doc = http("GET", f"{http_server}/v1/health")
        assert (status, doc) == (200, {"status": "ok"})

    def test_reading_round_trip(self, http_server):
        body = {"region_id": "r1", "timestamp_ms": 1000, "lux": 80.0,
                "image_pgm_b64": image_b64()}
        status, doc = http("PUT", f"{http_server}/v1/sensors/s1/readings", body)
        assert status == 200
        status, latest = http("GET",
                              f"{http_server}/v1/regions/r1/metrics/latest")
        assert status == 200
        assert latest == doc  # stored record is byte-identical to the ack

    def test_stale_conflict(self, http_server):
        body = {"region_id": "r1", "timestamp_ms": 1000, "lux": 80.0}
        body["image_pgm_b64"] = image_b64()
        assert http("PUT", f"{http_server}/v1/sensors/s1/readings", body)[0] == 200
        assert http("PUT", f"{http_server}/v1/sensors/s1/readings", body)[0] == 409

    def test_unknown_region_404(self, http_server):
        status, _ = http("GET", f"{http_server}/v1/regions/zz/metrics/latest")
        assert status == 404

    def test_malformed_body_400(self, http_server):
        status, _ = http("PUT", f"{http_server}/v1/sensors/s1/readings",
                         {"nope": 1})
        assert status == 400

    def test_trend_endpoint(self, http_server):
        for ts, lux in ((1000, 80.0), (2000, 90.0)):
            http("PUT", f"{http_server}/v1/sensors/s1/readings",
                 {"region_id": "r1", "timestamp_ms": ts, "lux": lux,
                  "image_pgm_b64": image_b64(seed=ts)})
        status, doc = http(
            "GET", f"{http_server}/v1/regions/r1/metrics/trend?window_s=60")
        assert status == 200
        assert doc["count"] == 2
        assert doc["metrics"]["illuminance"]["max"] == 90.0
        status, _ = http(
            "GET", f"{http_server}/v1/regions/r1/metrics/trend?window_s=-1")
        assert status == 400

    def test_actuator_command(self, http_server):
        status, doc = http("POST", f"{http_server}/v1/actuators/bulb1/commands",
                           {"kind": "set-brightness", "payload": 40.0})
        assert status == 202
        assert 0.0 <= doc["dispatch_latency_ms"] < 500.0
        status, _ = http("POST", f"{http_server}/v1/actuators/ghost/commands",
                         {"kind": "set-brightness", "payload": 40.0})
        assert status == 404

    def test_prediction_endpoint(self, http_server):
        status, doc = http(
            "GET",
            f"{http_server}/v1/regions/r1/prediction?texture=checkerboard&lux=300")
        assert status == 200
        assert doc["expected_error_cm"] == 4.1
        assert doc["class"] == "Good"
        assert doc["estimated"] is False
        status, _ = http(
            "GET", f"{http_server}/v1/regions/r1/prediction?texture=velvet&lux=300")
        assert status == 400

    def test_unknown_route_404(self, http_server):
        assert http("GET", f"{http_server}/v1/bogus")[0] == 404
