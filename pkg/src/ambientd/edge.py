"""Edge server core: sensor ingestion, characterization, policy stepping,
actuator dispatch, append-only metrics persistence and trend queries.

Transport-agnostic; the HTTP layer in httpapi.py is a thin wrapper around
EdgeService.
"""
from __future__ import annotations

import base64
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import characterize, markerpipe, policy
from .characterize import ImageMetrics, TextureClass
from .errors import (BadRequestError, InvalidArgumentError, NotFoundError,
                     StaleReadingError)
from .scene import MarkerSpec, SyntheticImage

DISPATCH_LATENCY_BUDGET_S = 0.5


@dataclass
class SensorReading:
    sensor_id: str
    region_id: str
    timestamp_ms: int
    lux: Optional[float] = None
    image_pgm_b64: Optional[str] = None

    def __post_init__(self):
        if self.lux is None and self.image_pgm_b64 is None:
            raise BadRequestError("reading must carry lux and/or an image")


@dataclass
class ActuatorCommand:
    actuator_id: str
    kind: str                    # "set-brightness" | "set-marker"
    payload: object              # percent float or MarkerSpec
    issued_at_ms: int = 0

    def __post_init__(self):
        if self.kind == "set-brightness":
            if not isinstance(self.payload, (int, float)):
                raise BadRequestError("set-brightness payload must be a percent")
        elif self.kind == "set-marker":
            if not isinstance(self.payload, MarkerSpec):
                raise BadRequestError("set-marker payload must be a marker spec")
        else:
            raise BadRequestError(f"unknown command kind {self.kind!r}")

    def to_json(self) -> dict:
        payload = self.payload
        if isinstance(payload, MarkerSpec):
            payload = {"pattern": payload.pattern, "size_index": payload.size_index}
        return {"kind": self.kind, "payload": payload,
                "issued_at_ms": self.issued_at_ms}

    @staticmethod
    def from_json(actuator_id: str, doc: dict) -> "ActuatorCommand":
        try:
            kind = doc["kind"]
            payload = doc["payload"]
            issued = int(doc.get("issued_at_ms", 0))
        except (KeyError, TypeError, ValueError):
            raise BadRequestError("malformed command body")
        if kind == "set-marker":
            if not isinstance(payload, dict):
                raise BadRequestError("set-marker payload must be an object")
            try:
                payload = MarkerSpec(payload["pattern"], int(payload["size_index"]))
            except (KeyError, TypeError, ValueError, InvalidArgumentError) as e:
                raise BadRequestError(f"bad marker payload: {e}")
        return ActuatorCommand(actuator_id, kind, payload, issued)


@dataclass
class MetricsRecord:
    region_id: str
    timestamp_ms: int
    metrics: ImageMetrics
    texture_class: TextureClass
    scene_change: bool

    def to_json(self) -> dict:
        return {
            "region_id": self.region_id,
            "timestamp_ms": self.timestamp_ms,
            "metrics": {
                "brightness": self.metrics.brightness,
                "contrast": self.metrics.contrast,
                "edge_strength": self.metrics.edge_strength,
                "corner_count": self.metrics.corner_count,
                "illuminance": self.metrics.illuminance,
            },
            "texture_class": self.texture_class.value,
            "scene_change": self.scene_change,
        }

    @staticmethod
    def from_json(doc: dict) -> "MetricsRecord":
        m = doc["metrics"]
        return MetricsRecord(
            doc["region_id"], int(doc["timestamp_ms"]),
            ImageMetrics(m["brightness"], m["contrast"], m["edge_strength"],
                         int(m["corner_count"]), m["illuminance"]),
            TextureClass(doc["texture_class"]), bool(doc["scene_change"]))


@dataclass
class TrendSummary:
    window_s: float
    count: int
    change_events: int
    stats: Dict[str, Dict[str, float]]   # metric -> {min, mean, max}

    def to_json(self) -> dict:
        return {"window_s": self.window_s, "count": self.count,
                "change_events": self.change_events, "metrics": self.stats}


@dataclass
class RegionConfig:
    region_id: str
    mode: str = "markerless"             # "markerless" | "marker"
    bulb_actuator: Optional[str] = None
    eink_actuator: Optional[str] = None
    curve: policy.CalibrationCurve = field(
        default_factory=lambda: policy.DEFAULT_CALIBRATION_CURVE)
    deadband_fraction: float = policy.DEFAULT_DEADBAND_FRACTION
    settle_s: float = policy.DEFAULT_SETTLE_S
    target_percentage: float = policy.DEFAULT_TARGET_PERCENTAGE
    marker_fast_threshold: int = markerpipe.DEFAULT_MATCH_FAST_THRESHOLD
    initial_marker: Optional[MarkerSpec] = None
    max_size_index: int = 2
    constraints: List[policy.ControlConstraint] = field(default_factory=list)


class _RegionRuntime:
    def __init__(self, config: RegionConfig, log_path: Path):
        self.config = config
        self.log_path = log_path
        self.lock = threading.RLock()
        self.records: List[MetricsRecord] = []
        self.last_image_metrics: Optional[ImageMetrics] = None
        self.last_texture = TextureClass.COARSE
        self.last_lux: Optional[float] = None
        self.illum_state = policy.IlluminancePolicyState(
            deadband_fraction=config.deadband_fraction, settle_s=config.settle_s)
        self.marker_state: Optional[policy.MarkerControllerState] = None
        if config.mode == "marker":
            spec = config.initial_marker or MarkerSpec("binary-grid-A", 0)
            self.marker_state = policy.MarkerControllerState(
                current_spec=spec,
                target_percentage=config.target_percentage,
                max_size_index=config.max_size_index,
                deadband_fraction=config.deadband_fraction,
                settle_s=config.settle_s)
        self.last_match: Optional[characterize.MatchReport] = None
        self.commands: List[ActuatorCommand] = []


class EdgeService:
    """Single edge server hosting both optimization pipelines."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._regions: Dict[str, _RegionRuntime] = {}
        self._actuators: Dict[str, Callable[[ActuatorCommand], None]] = {}
        self._sensor_last_ts: Dict[str, int] = {}
        self._global_lock = threading.Lock()

    # -- registration -----------------------------------------------------

    def register_region(self, config: RegionConfig) -> None:
        path = self.data_dir / f"region_{config.region_id}.jsonl"
        runtime = _RegionRuntime(config, path)
        if path.exists():
            with path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        runtime.records.append(MetricsRecord.from_json(json.loads(line)))
            for rec in runtime.records:
                if rec.metrics.illuminance is not None:
                    runtime.last_lux = rec.metrics.illuminance
                runtime.last_texture = rec.texture_class
        with self._global_lock:
            self._regions[config.region_id] = runtime

    def register_actuator(self, actuator_id: str,
                          accept: Callable[[ActuatorCommand], None]) -> None:
        with self._global_lock:
            self._actuators[actuator_id] = accept

    def _runtime(self, region_id: str) -> _RegionRuntime:
        runtime = self._regions.get(region_id)
        if runtime is None:
            raise NotFoundError(f"unknown region {region_id!r}")
        return runtime

    # -- ingestion --------------------------------------------------------

    def ingest_reading(self, reading: SensorReading) -> MetricsRecord:
        runtime = self._runtime(reading.region_id)
        image = None
        if reading.image_pgm_b64 is not None:
            try:
                raw = base64.b64decode(reading.image_pgm_b64, validate=True)
                image = SyntheticImage.from_pgm(raw)
            except (ValueError, InvalidArgumentError) as e:
                raise BadRequestError(f"bad image payload: {e}")
        with runtime.lock:
            last = self._sensor_last_ts.get(reading.sensor_id)
            if last is not None and reading.timestamp_ms <= last:
                raise StaleReadingError(
                    f"timestamp {reading.timestamp_ms} not newer than {last}")
            self._sensor_last_ts[reading.sensor_id] = reading.timestamp_ms

            scene_change = False
            if image is not None:
                metrics = characterize.compute_metrics(image, reading.lux)
                texture = characterize.classify_texture(metrics)
                if runtime.last_image_metrics is not None:
                    scene_change = characterize.detect_scene_change(
                        runtime.last_image_metrics, metrics)
                runtime.last_image_metrics = metrics
                runtime.last_texture = texture
            else:
                prev = runtime.last_image_metrics
                if prev is not None:
                    metrics = ImageMetrics(prev.brightness, prev.contrast,
                                           prev.edge_strength, prev.corner_count,
                                           reading.lux)
                else:
                    metrics = ImageMetrics(0.0, 0.0, 0.0, 0, reading.lux)
                texture = runtime.last_texture
            if reading.lux is not None:
                runtime.last_lux = reading.lux

            record = MetricsRecord(reading.region_id, reading.timestamp_ms,
                                   metrics, texture, scene_change)
            runtime.records.append(record)
            with runtime.log_path.open("a") as fh:
                fh.write(json.dumps(record.to_json()) + "\n")

            self._policy_step(runtime, record, image)
        return record

    def _policy_step(self, runtime: _RegionRuntime, record: MetricsRecord,
                     image: Optional[SyntheticImage]) -> None:
        config = runtime.config
        now_s = record.timestamp_ms / 1000.0
        if config.mode == "markerless":
            if runtime.last_lux is None:
                return
            optimal = policy.select_optimal_lux(record.texture_class)
            if config.constraints:
                system = policy.ControlConstraint(
                    "ar-tracking", 50.0, 1000.0, optimal, priority=0)
                optimal = policy.resolve_constraints([system] + config.constraints)
            runtime.illum_state.optimal_lux = optimal
            command = policy.illuminance_control_step(
                runtime.illum_state, runtime.last_lux, config.curve, now_s)
            if command is not None and config.bulb_actuator:
                self._issue(runtime, ActuatorCommand(
                    config.bulb_actuator, "set-brightness", command,
                    record.timestamp_ms))
        elif config.mode == "marker" and runtime.marker_state is not None:
            if image is None or runtime.last_lux is None:
                return
            report = markerpipe.match_marker(
                image, runtime.marker_state.current_spec,
                config.marker_fast_threshold)
            runtime.last_match = report
            state, intents = policy.marker_control_step(
                runtime.marker_state, report, record.texture_class,
                runtime.last_lux, config.curve, now_s)
            runtime.marker_state = state
            for intent in intents:
                if isinstance(intent, policy.SetBrightness) and config.bulb_actuator:
                    self._issue(runtime, ActuatorCommand(
                        config.bulb_actuator, "set-brightness", intent.command,
                        record.timestamp_ms))
                elif isinstance(intent, policy.SetMarker) and config.eink_actuator:
                    self._issue(runtime, ActuatorCommand(
                        config.eink_actuator, "set-marker", intent.spec,
                        record.timestamp_ms))

    def _issue(self, runtime: _RegionRuntime, cmd: ActuatorCommand) -> None:
        runtime.commands.append(cmd)
        self.dispatch_command(cmd)

    # -- queries ----------------------------------------------------------

    def get_latest_metrics(self, region_id: str) -> MetricsRecord:
        runtime = self._runtime(region_id)
        with runtime.lock:
            if not runtime.records:
                raise NotFoundError(f"no records for region {region_id!r}")
            return runtime.records[-1]

    def get_trend(self, region_id: str, window_s: float) -> TrendSummary:
        if window_s <= 0:
            raise BadRequestError("window must be > 0")
        runtime = self._runtime(region_id)
        with runtime.lock:
            if not runtime.records:
                raise NotFoundError(f"no records for region {region_id!r}")
            now_ms = runtime.records[-1].timestamp_ms
            cutoff = now_ms - int(window_s * 1000)
            window = [r for r in runtime.records if r.timestamp_ms >= cutoff]
        if not window:
            raise NotFoundError("no records inside the window")
        stats = {}
        for name in ("brightness", "contrast", "edge_strength", "corner_count",
                     "illuminance"):
            values = [getattr(r.metrics, name) for r in window]
            values = [v for v in values if v is not None]
            if not values:
                continue
            stats[name] = {"min": float(min(values)),
                           "mean": float(sum(values) / len(values)),
                           "max": float(max(values))}
        change_events = sum(1 for r in window if r.scene_change)
        return TrendSummary(window_s, len(window), change_events, stats)

    def marker_phase(self, region_id: str) -> Optional[str]:
        runtime = self._runtime(region_id)
        if runtime.marker_state is None:
            return None
        return runtime.marker_state.phase.value

    def region_commands(self, region_id: str) -> List[ActuatorCommand]:
        return list(self._runtime(region_id).commands)

    # -- actuation --------------------------------------------------------

    def dispatch_command(self, cmd: ActuatorCommand) -> float:
        """Forward a command to its actuator; returns dispatch latency in ms."""
        accept = self._actuators.get(cmd.actuator_id)
        if accept is None:
            raise NotFoundError(f"unknown actuator {cmd.actuator_id!r}")
        start = time.monotonic()
        accept(cmd)
        return (time.monotonic() - start) * 1000.0
