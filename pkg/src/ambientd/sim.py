"""Deterministic discrete-event scenario runner.

Wires synthetic sensors, actuators and the edge service together on a virtual
clock. In-process transport is single-threaded and byte-reproducible; the
real-http transport drives the same edge service through a local HTTP server.
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import io
import json
import math
import tempfile
import threading
import urllib.request
from base64 import b64encode
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import policy
from .edge import ActuatorCommand, EdgeService, RegionConfig, SensorReading
from .errors import ConfigError, InvalidArgumentError
from .markerpipe import DEFAULT_MATCH_FAST_THRESHOLD, match_marker
from .scene import (DEFAULT_BULB_LATENCY_S, DEFAULT_EINK_LATENCY_S,
                    EnvironmentState, LuxCurve, MarkerPlacement, MarkerSpec,
                    Region, SyntheticImage, TextureSpec, apply_bulb_command,
                    BulbState, read_light_sensor, render_region)

CANONICAL_W = 320
CANONICAL_H = 240
DEFAULT_SENSOR_PERIOD_S = 5.0
DEFAULT_SWEEP_TRIALS = 20


def stable_seed(*parts) -> int:
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def default_sweep_lux_levels(n: int = 9) -> List[float]:
    return [float(round(v, 1)) for v in np.geomspace(50.0, 1000.0, n)]


# -- scenario ------------------------------------------------------------


@dataclass
class RegionScenario:
    id: str
    texture: TextureSpec
    illuminance: float
    mode: str = "markerless"
    marker: Optional[MarkerPlacement] = None
    max_lux: Optional[float] = None
    constraints: List[policy.ControlConstraint] = field(default_factory=list)


@dataclass
class Scenario:
    regions: List[RegionScenario]
    duration_s: float = 60.0
    sensor_period_s: float = DEFAULT_SENSOR_PERIOD_S
    bulb_latency_s: float = DEFAULT_BULB_LATENCY_S
    eink_latency_s: float = DEFAULT_EINK_LATENCY_S
    lux_curve_points: List[Tuple[float, float]] = field(
        default_factory=lambda: [(0.0, 10.0), (100.0, 1000.0)])
    deadband_fraction: float = policy.DEFAULT_DEADBAND_FRACTION
    settle_s: float = policy.DEFAULT_SETTLE_S
    target_percentage: float = policy.DEFAULT_TARGET_PERCENTAGE
    marker_fast_threshold: int = DEFAULT_MATCH_FAST_THRESHOLD
    max_size_index: int = 2
    sensor_noise_fraction: float = 0.02
    camera_sigma0: float = 4.0
    trajectory: List[dict] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        if self.sensor_period_s <= 0:
            raise ConfigError("sensor_period_s must be > 0")
        if self.duration_s < self.sensor_period_s:
            raise ConfigError("duration_s must be >= sensor_period_s")
        if not self.regions:
            raise ConfigError("scenario needs at least one region")
        ids = [r.id for r in self.regions]
        if len(ids) != len(set(ids)):
            raise ConfigError("region ids must be unique")
        for event in self.trajectory:
            if event.get("region") not in ids:
                raise ConfigError(
                    f"trajectory references unknown region {event.get('region')!r}")


def _texture_from_json(doc: dict, where: str) -> TextureSpec:
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError(f"{where}.texture must be an object with 'kind'")
    kwargs = {}
    for key in ("value", "low", "high", "frequency"):
        if key in doc:
            kwargs[key] = float(doc[key])
    for key in ("cell", "texture_seed"):
        if key in doc:
            kwargs[key] = int(doc[key])
    try:
        return TextureSpec(doc["kind"], **kwargs)
    except InvalidArgumentError as e:
        raise ConfigError(f"{where}.texture: {e}")


def scenario_from_json(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    if "regions" not in doc or not isinstance(doc["regions"], list):
        raise ConfigError("scenario.regions must be a list")
    regions = []
    for i, r in enumerate(doc["regions"]):
        where = f"regions[{i}]"
        if "id" not in r:
            raise ConfigError(f"{where}.id is required")
        marker = None
        if r.get("marker") is not None:
            m = r["marker"]
            try:
                marker = MarkerPlacement(
                    MarkerSpec(m["pattern"], int(m.get("size_index", 0))),
                    float(m.get("distance_cm", 30.0)),
                    float(m.get("viewing_angle_deg", 0.0)))
            except (KeyError, TypeError, ValueError, InvalidArgumentError) as e:
                raise ConfigError(f"{where}.marker: {e}")
        constraints = []
        for j, c in enumerate(r.get("constraints", [])):
            try:
                constraints.append(policy.ControlConstraint(
                    c.get("source", f"constraint-{j}"),
                    float(c["range"][0]), float(c["range"][1]),
                    float(c["preferred"]), int(c.get("priority", 0))))
            except (KeyError, TypeError, ValueError, IndexError,
                    InvalidArgumentError) as e:
                raise ConfigError(f"{where}.constraints[{j}]: {e}")
        try:
            illuminance = float(r["illuminance"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"{where}.illuminance is required")
        mode = r.get("mode", "markerless")
        if mode not in ("markerless", "marker"):
            raise ConfigError(f"{where}.mode must be markerless or marker")
        if mode == "marker" and marker is None:
            raise ConfigError(f"{where}: marker mode requires a marker placement")
        regions.append(RegionScenario(
            id=str(r["id"]),
            texture=_texture_from_json(r.get("texture", {"kind": "flat"}), where),
            illuminance=illuminance,
            mode=mode,
            marker=marker,
            max_lux=(float(r["max_lux"]) if r.get("max_lux") is not None else None),
            constraints=constraints))
    pol = doc.get("policy", {})
    try:
        scenario = Scenario(
            regions=regions,
            duration_s=float(doc.get("duration_s", 60.0)),
            sensor_period_s=float(doc.get("sensor_period_s", DEFAULT_SENSOR_PERIOD_S)),
            bulb_latency_s=float(doc.get("bulb_latency_s", DEFAULT_BULB_LATENCY_S)),
            eink_latency_s=float(doc.get("eink_latency_s", DEFAULT_EINK_LATENCY_S)),
            lux_curve_points=[(float(c), float(l))
                              for c, l in doc.get("lux_curve",
                                                  [[0, 10], [100, 1000]])],
            deadband_fraction=float(pol.get("deadband_fraction",
                                            policy.DEFAULT_DEADBAND_FRACTION)),
            settle_s=float(pol.get("settle_s", policy.DEFAULT_SETTLE_S)),
            target_percentage=float(pol.get("target_percentage",
                                            policy.DEFAULT_TARGET_PERCENTAGE)),
            marker_fast_threshold=int(pol.get("marker_fast_threshold",
                                              DEFAULT_MATCH_FAST_THRESHOLD)),
            max_size_index=int(pol.get("max_size_index", 2)),
            sensor_noise_fraction=float(doc.get("sensor_noise_fraction", 0.02)),
            camera_sigma0=float(doc.get("camera_sigma0", 4.0)),
            trajectory=list(doc.get("trajectory", [])),
            seed=int(doc.get("seed", 0)))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad scenario field: {e}")
    scenario.validate()
    return scenario


def load_scenario(path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"scenario file is not valid JSON: {e}")
    return scenario_from_json(doc)


# -- event queue ---------------------------------------------------------


class _EventQueue:
    def __init__(self):
        self._heap: List[Tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self.now_ms = 0

    def schedule(self, t_ms: int, fn: Callable[[], None]) -> None:
        if t_ms < self.now_ms:
            raise InvalidArgumentError("cannot schedule into the past")
        heapq.heappush(self._heap, (t_ms, self._seq, fn))
        self._seq += 1

    def run_until(self, end_ms: int) -> None:
        while self._heap and self._heap[0][0] <= end_ms:
            t_ms, _, fn = heapq.heappop(self._heap)
            self.now_ms = t_ms
            fn()
        self.now_ms = end_ms


# -- actuator nodes ------------------------------------------------------


class _BulbNode:
    def __init__(self, sim: "Simulator", region_id: str, latency_s: float):
        self.sim = sim
        self.region_id = region_id
        self.latency_ms = int(round(latency_s * 1000))

    def accept(self, cmd: ActuatorCommand) -> None:
        sim = self.sim
        command = float(cmd.payload)
        sim.log(f"bulb/{self.region_id}", "command-accepted",
                {"command": command})
        def apply():
            apply_bulb_command(BulbState(command), sim.env, self.region_id)
            sim.log(f"bulb/{self.region_id}", "applied",
                    {"command": command,
                     "lux": sim.env.region(self.region_id).illuminance})
        sim.queue.schedule(sim.queue.now_ms + self.latency_ms, apply)


class _EInkNode:
    def __init__(self, sim: "Simulator", region_id: str, latency_s: float,
                 displayed: MarkerSpec):
        self.sim = sim
        self.region_id = region_id
        self.latency_ms = int(round(latency_s * 1000))
        self.displayed = displayed
        self._version = 0

    def accept(self, cmd: ActuatorCommand) -> None:
        sim = self.sim
        spec: MarkerSpec = cmd.payload
        if spec == self.displayed:
            sim.log(f"eink/{self.region_id}", "command-noop",
                    {"pattern": spec.pattern, "size_index": spec.size_index})
            return
        self._version += 1
        version = self._version
        sim.log(f"eink/{self.region_id}", "command-accepted",
                {"pattern": spec.pattern, "size_index": spec.size_index})
        def apply():
            if version != self._version:  # superseded by a later command
                return
            self.displayed = spec
            region = sim.env.region(self.region_id)
            if region.marker is not None:
                region.marker.spec = spec
            sim.log(f"eink/{self.region_id}", "visible-change",
                    {"pattern": spec.pattern, "size_index": spec.size_index})
        sim.queue.schedule(sim.queue.now_ms + self.latency_ms, apply)


# -- transports ----------------------------------------------------------


class InProcessTransport:
    def __init__(self, service: EdgeService):
        self.service = service

    def put_reading(self, sensor_id: str, body: dict) -> None:
        self.service.ingest_reading(SensorReading(
            sensor_id=sensor_id,
            region_id=body["region_id"],
            timestamp_ms=body["timestamp_ms"],
            lux=body.get("lux"),
            image_pgm_b64=body.get("image_pgm_b64")))

    def close(self):
        pass


class HttpTransport:
    """Drives a local HTTP server wrapping the same edge service."""

    def __init__(self, service: EdgeService, host: str = "127.0.0.1"):
        from .httpapi import make_server
        self.server = make_server(service, host, 0)
        self.base_url = f"http://{host}:{self.server.server_address[1]}"
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        daemon=True)
        self._thread.start()

    def put_reading(self, sensor_id: str, body: dict) -> None:
        req = urllib.request.Request(
            f"{self.base_url}/v1/sensors/{sensor_id}/readings",
            data=json.dumps(body).encode("utf-8"),
            headers={"Content-Type": "application/json"}, method="PUT")
        with urllib.request.urlopen(req, timeout=30) as resp:
            resp.read()

    def close(self):
        self.server.shutdown()
        self.server.server_close()
        self._thread.join(timeout=5)


# -- simulator -----------------------------------------------------------


class Simulator:
    def __init__(self, scenario: Scenario, transport: str = "in-process",
                 data_dir=None):
        scenario.validate()
        self.scenario = scenario
        self.queue = _EventQueue()
        self.event_log: List[dict] = []
        self.env = EnvironmentState(
            regions={r.id: Region(r.id, r.texture, r.illuminance,
                                  marker=r.marker, max_lux=r.max_lux)
                     for r in scenario.regions},
            lux_curve=LuxCurve(scenario.lux_curve_points))
        self._tmpdir = None
        if data_dir is None:
            self._tmpdir = tempfile.TemporaryDirectory(prefix="ambientd-sim-")
            data_dir = self._tmpdir.name
        self.service = EdgeService(data_dir)
        curve = policy.CalibrationCurve(scenario.lux_curve_points)
        self._lux_readings: Dict[str, List[Tuple[int, float]]] = {}
        self._cycles: Dict[str, int] = {}
        for r in scenario.regions:
            bulb_id = f"bulb:{r.id}"
            eink_id = f"eink:{r.id}"
            self.service.register_region(RegionConfig(
                region_id=r.id,
                mode=r.mode,
                bulb_actuator=bulb_id,
                eink_actuator=eink_id,
                curve=curve,
                deadband_fraction=scenario.deadband_fraction,
                settle_s=scenario.settle_s,
                target_percentage=scenario.target_percentage,
                marker_fast_threshold=scenario.marker_fast_threshold,
                initial_marker=(r.marker.spec if r.marker else None),
                max_size_index=scenario.max_size_index,
                constraints=r.constraints))
            bulb = _BulbNode(self, r.id, scenario.bulb_latency_s)
            self.service.register_actuator(bulb_id, bulb.accept)
            if r.marker is not None:
                eink = _EInkNode(self, r.id, scenario.eink_latency_s,
                                 r.marker.spec)
                self.service.register_actuator(eink_id, eink.accept)
            self._lux_readings[r.id] = []
            self._cycles[r.id] = 0
        self._satisfied_cycle: Dict[str, Optional[int]] = {
            r.id: None for r in scenario.regions}
        if transport == "in-process":
            self.transport = InProcessTransport(self.service)
        elif transport == "real-http":
            self.transport = HttpTransport(self.service)
        else:
            raise ConfigError(f"unknown transport {transport!r}")

    def log(self, node: str, kind: str, payload: dict) -> None:
        digest = hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
        self.event_log.append({"t_ms": self.queue.now_ms, "node": node,
                               "kind": kind, "digest": digest})

    def _sensor_tick(self, region_id: str) -> None:
        scenario = self.scenario
        region = self.env.region(region_id)
        t_ms = self.queue.now_ms
        lux = read_light_sensor(
            region, stable_seed(scenario.seed, "lux", region_id, t_ms),
            noise_fraction=scenario.sensor_noise_fraction)
        image = render_region(
            region, stable_seed(scenario.seed, "cam", region_id, t_ms),
            CANONICAL_W, CANONICAL_H, sigma0=scenario.camera_sigma0)
        body = {"region_id": region_id, "timestamp_ms": t_ms, "lux": lux,
                "image_pgm_b64": b64encode(image.to_pgm()).decode("ascii")}
        self.log(f"sensor/{region_id}", "reading",
                 {"lux": lux, "image_sha": hashlib.sha256(
                     image.pixels.tobytes()).hexdigest()})
        self._lux_readings[region_id].append((t_ms, lux))
        self._cycles[region_id] += 1
        self.transport.put_reading(f"sensor:{region_id}", body)
        if (self._satisfied_cycle[region_id] is None
                and self.service.marker_phase(region_id) == "Satisfied"):
            self._satisfied_cycle[region_id] = self._cycles[region_id]

    def run(self) -> Tuple[List[dict], dict]:
        scenario = self.scenario
        period_ms = int(round(scenario.sensor_period_s * 1000))
        duration_ms = int(round(scenario.duration_s * 1000))
        for event in scenario.trajectory:
            t_ms = int(round(float(event.get("t_s", 0.0)) * 1000))
            region_id = event["region"]
            def make_apply(region_id=region_id, event=event):
                def apply():
                    region = self.env.region(region_id)
                    if region.marker is None:
                        return
                    if "distance_cm" in event:
                        region.marker.distance_cm = float(event["distance_cm"])
                    if "angle_deg" in event:
                        region.marker.viewing_angle_deg = float(event["angle_deg"])
                    self.log(f"trajectory/{region_id}", "pose",
                             {"distance_cm": region.marker.distance_cm,
                              "angle_deg": region.marker.viewing_angle_deg})
                return apply
            self.queue.schedule(t_ms, make_apply())
        for r in scenario.regions:
            for t_ms in range(0, duration_ms + 1, period_ms):
                self.queue.schedule(
                    t_ms, lambda rid=r.id: self._sensor_tick(rid))
        try:
            self.queue.run_until(duration_ms)
        finally:
            self.transport.close()
        return self.event_log, self._final_report()

    def _final_report(self) -> dict:
        scenario = self.scenario
        regions = {}
        for r in scenario.regions:
            runtime = self.service._runtime(r.id)
            reads = self._lux_readings[r.id]
            tail = [lux for _, lux in reads[-3:]]
            optimal = runtime.illum_state.optimal_lux
            if r.mode == "marker" and runtime.marker_state is not None:
                optimal = policy.select_optimal_lux(runtime.last_texture)
            deadband = scenario.deadband_fraction * optimal
            converged = (len(tail) == 3
                         and all(abs(v - optimal) <= deadband for v in tail))
            commands = self.service.region_commands(r.id)
            regions[r.id] = {
                "final_lux": self.env.region(r.id).illuminance,
                "converged_lux": (sum(tail) / len(tail)) if tail else None,
                "optimal_lux": optimal,
                "converged": converged,
                "observation_cycles": self._cycles[r.id],
                "bulb_commands": sum(1 for c in commands
                                     if c.kind == "set-brightness"),
                "eink_commands": sum(1 for c in commands
                                     if c.kind == "set-marker"),
                "marker_phase": self.service.marker_phase(r.id),
                "satisfied_after_cycles": self._satisfied_cycle[r.id],
                "last_match_percentage": (
                    runtime.last_match.percentage
                    if runtime.last_match is not None else None),
                "bulb_command_series": [float(c.payload) for c in commands
                                        if c.kind == "set-brightness"],
            }
        return {"seed": scenario.seed, "duration_s": scenario.duration_s,
                "transport_note": "virtual-time", "regions": regions}


def run_scenario(scenario: Scenario, transport: str = "in-process",
                 out_dir=None) -> Tuple[List[dict], dict]:
    data_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        data_dir = out_dir / "data"
    sim = Simulator(scenario, transport, data_dir=data_dir)
    event_log, report = sim.run()
    if out_dir is not None:
        with (out_dir / "events.jsonl").open("w") as fh:
            for event in event_log:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
        with (out_dir / "report.json").open("w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        _write_metrics_csv(sim, out_dir / "metrics.csv")
    return event_log, report


def _write_metrics_csv(sim: Simulator, path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "timestamp_ms", "brightness", "contrast",
                         "edge_strength", "corner_count", "illuminance",
                         "texture_class", "scene_change"])
        for r in sim.scenario.regions:
            for rec in sim.service._runtime(r.id).records:
                writer.writerow([
                    rec.region_id, rec.timestamp_ms,
                    rec.metrics.brightness, rec.metrics.contrast,
                    rec.metrics.edge_strength, rec.metrics.corner_count,
                    rec.metrics.illuminance, rec.texture_class.value,
                    int(rec.scene_change)])


# -- calibration harness -------------------------------------------------


def run_calibration(scenario: Scenario, region_id: str,
                    steps: int = 11) -> policy.CalibrationCurve:
    """Sweep the bulb over a region of the scenario and fit a curve."""
    env = EnvironmentState(
        regions={r.id: Region(r.id, r.texture, r.illuminance, marker=r.marker,
                              max_lux=r.max_lux)
                 for r in scenario.regions},
        lux_curve=LuxCurve(scenario.lux_curve_points))
    env.region(region_id)  # not-found check up front
    counter = {"n": 0}

    def set_brightness(command: float) -> None:
        apply_bulb_command(BulbState(command), env, region_id)

    def read_lux() -> float:
        counter["n"] += 1
        return read_light_sensor(
            env.region(region_id),
            stable_seed(scenario.seed, "calib", region_id, counter["n"]),
            noise_fraction=scenario.sensor_noise_fraction)

    return policy.calibrate(set_brightness, read_lux, steps)


# -- marker sweep --------------------------------------------------------


def sweep_marker_grid(patterns=None, distances=None, angles=None,
                      lux_levels=None, trials: int = DEFAULT_SWEEP_TRIALS,
                      size_index: int = 0, seed: int = 0,
                      threshold: int = DEFAULT_MATCH_FAST_THRESHOLD,
                      background: Optional[TextureSpec] = None) -> List[dict]:
    """Open-loop grid of mean match percentages (controller disabled)."""
    if trials < 1:
        raise InvalidArgumentError("trials must be >= 1")
    from .scene import MARKER_PATTERNS
    patterns = list(patterns or MARKER_PATTERNS)
    distances = list(distances or range(20, 91, 10))
    angles = list(angles or range(0, 61, 15))
    lux_levels = list(lux_levels or default_sweep_lux_levels())
    background = background or TextureSpec("flat", value=0.6)
    rows = []
    for pattern in patterns:
        for distance in distances:
            for angle in angles:
                for lux in lux_levels:
                    spec = MarkerSpec(pattern, size_index)
                    region = Region("sweep", background, float(lux),
                                    marker=MarkerPlacement(spec, float(distance),
                                                           float(angle)))
                    total = 0.0
                    for trial in range(trials):
                        image = render_region(
                            region,
                            stable_seed(seed, "sweep", pattern, distance,
                                        angle, lux, trial),
                            CANONICAL_W, CANONICAL_H)
                        total += match_marker(image, spec, threshold).percentage
                    rows.append({"pattern": pattern, "distance_cm": distance,
                                 "angle_deg": angle, "lux": lux,
                                 "trials": trials,
                                 "mean_match_percentage": total / trials})
    return rows


def write_sweep_csv(rows: List[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "pattern", "distance_cm", "angle_deg", "lux", "trials",
            "mean_match_percentage"])
        writer.writeheader()
        writer.writerows(rows)
