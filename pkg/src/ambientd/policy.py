"""Decision layer: illuminance setpoint control with a deadband, actuator
calibration, the marker adaptation state machine, constraint resolution, and
tracking-quality prediction.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from .errors import CalibrationError, InvalidArgumentError
from .characterize import MatchReport, TextureClass
from .scene import MARKER_PATTERNS, MarkerSpec

OPTIMAL_LUX_COARSE = 300.0
OPTIMAL_LUX_FINE = 750.0
DEFAULT_DEADBAND_FRACTION = 0.10
DEFAULT_SETTLE_S = 2.0
DEFAULT_TARGET_PERCENTAGE = 60.0
GOOD_TRACKING_ERROR_CM = 5.0

# Escalation order for pattern switching; image markers last (most robust
# to viewing conditions, but switching invalidates the reference most).
PATTERN_SWITCH_ORDER = MARKER_PATTERNS

LUX_BANDS = (("low", 50.0, 100.0), ("medium", 150.0, 450.0), ("high", 500.0, 1000.0))

# (texture label, band) -> (mean error cm, estimated). Non-estimated cells are
# measured values; estimated ones are shipped defaults and flagged as such.
DEFAULT_ERROR_TABLE = {
    ("checkerboard", "low"): (15.0, True),
    ("checkerboard", "medium"): (4.1, False),
    ("checkerboard", "high"): (3.0, True),
    ("fine-paper-like", "low"): (25.0, True),
    ("fine-paper-like", "medium"): (12.0, False),
    ("fine-paper-like", "high"): (5.0, True),
}


def select_optimal_lux(texture: TextureClass) -> float:
    return OPTIMAL_LUX_FINE if texture is TextureClass.FINE else OPTIMAL_LUX_COARSE


class CalibrationCurve:
    """Command-percent to lux map built from measured samples.

    Lux values are made monotone non-decreasing with pool-adjacent-violators
    before use; inversion is piecewise linear.
    """

    def __init__(self, points):
        pts = sorted((float(c), float(l)) for c, l in points)
        if len(pts) < 2:
            raise CalibrationError("calibration needs at least 2 points")
        cmds = [p[0] for p in pts]
        if any(b <= a for a, b in zip(cmds, cmds[1:])):
            raise CalibrationError("calibration commands must be strictly increasing")
        self.commands = np.array(cmds)
        self.luxes = _pool_adjacent_violators(np.array([p[1] for p in pts]))
        self.points = list(zip(self.commands.tolist(), self.luxes.tolist()))

    def lux_at(self, command: float) -> float:
        return float(np.interp(command, self.commands, self.luxes))

    def invert(self, target_lux: float) -> Tuple[float, bool]:
        """Lowest command achieving target_lux.

        If the target exceeds the curve's maximum, returns the lowest command
        achieving that maximum with reachable=False.
        """
        max_lux = float(self.luxes[-1])
        if target_lux > max_lux:
            idx = int(np.argmax(self.luxes >= max_lux))
            return float(np.clip(self.commands[idx], 0.0, 100.0)), False
        if target_lux <= self.luxes[0]:
            return float(np.clip(self.commands[0], 0.0, 100.0)), True
        idx = int(np.searchsorted(self.luxes, target_lux, side="left"))
        lo_l, hi_l = self.luxes[idx - 1], self.luxes[idx]
        lo_c, hi_c = self.commands[idx - 1], self.commands[idx]
        if hi_l == lo_l:
            cmd = lo_c
        else:
            cmd = lo_c + (hi_c - lo_c) * (target_lux - lo_l) / (hi_l - lo_l)
        return float(np.clip(cmd, 0.0, 100.0)), True


def _pool_adjacent_violators(y: np.ndarray) -> np.ndarray:
    values = y.astype(float).tolist()
    weights = [1.0] * len(values)
    means: List[float] = []
    counts: List[float] = []
    for v, w in zip(values, weights):
        means.append(v)
        counts.append(w)
        while len(means) > 1 and means[-2] > means[-1]:
            m = (means[-2] * counts[-2] + means[-1] * counts[-1]) / (counts[-2] + counts[-1])
            c = counts[-2] + counts[-1]
            means = means[:-2] + [m]
            counts = counts[:-2] + [c]
    out = []
    for m, c in zip(means, counts):
        out.extend([m] * int(c))
    return np.array(out)


DEFAULT_CALIBRATION_CURVE = CalibrationCurve([(0.0, 10.0), (100.0, 1000.0)])


@dataclass
class IlluminancePolicyState:
    optimal_lux: float = OPTIMAL_LUX_COARSE
    deadband_fraction: float = DEFAULT_DEADBAND_FRACTION
    settle_s: float = DEFAULT_SETTLE_S
    last_command: Optional[float] = None
    settle_until: float = -math.inf

    def __post_init__(self):
        if not (0.0 < self.deadband_fraction < 0.5):
            raise InvalidArgumentError("deadband fraction must be in (0, 0.5)")


def illuminance_control_step(state: IlluminancePolicyState, measured_lux: float,
                             curve: CalibrationCurve, now: float
                             ) -> Optional[float]:
    """One control cycle; returns a bulb command percent or None.

    No command inside the deadband or while a previous command settles.
    """
    if abs(measured_lux - state.optimal_lux) <= state.deadband_fraction * state.optimal_lux:
        return None
    if now < state.settle_until:
        return None
    command, _ = curve.invert(state.optimal_lux)
    state.last_command = command
    state.settle_until = now + state.settle_s
    return command


def calibrate(set_brightness: Callable[[float], None],
              read_lux: Callable[[], float], steps: int = 11) -> CalibrationCurve:
    """Sweep bulb commands and record settled lux at each knot.

    set_brightness must block (in simulation: advance the virtual clock) until
    the bulb has settled.
    """
    if steps < 2:
        raise CalibrationError("calibration needs at least 2 steps")
    points = []
    for command in np.linspace(0.0, 100.0, steps):
        set_brightness(float(command))
        try:
            lux = read_lux()
        except TimeoutError as e:
            raise CalibrationError(f"light sensor timeout at command {command}") from e
        points.append((float(command), float(lux)))
    return CalibrationCurve(points)


class MarkerPhase(enum.Enum):
    ADJUST_LIGHT = "AdjustLight"
    ENLARGE_MARKER = "EnlargeMarker"
    SWITCH_PATTERN = "SwitchPattern"
    SATISFIED = "Satisfied"
    EXHAUSTED = "Exhausted"


@dataclass(frozen=True)
class SetBrightness:
    command: float


@dataclass(frozen=True)
class SetMarker:
    spec: MarkerSpec


@dataclass
class MarkerControllerState:
    current_spec: MarkerSpec
    target_percentage: float = DEFAULT_TARGET_PERCENTAGE
    phase: MarkerPhase = MarkerPhase.ADJUST_LIGHT
    light_attempts: int = 0
    max_size_index: int = 2
    deadband_fraction: float = DEFAULT_DEADBAND_FRACTION
    settle_s: float = DEFAULT_SETTLE_S
    settle_until: float = -math.inf
    patterns_tried: tuple = ()


def marker_control_step(state: MarkerControllerState, report: MatchReport,
                        texture: TextureClass, measured_lux: float,
                        curve: CalibrationCurve, now: float
                        ) -> Tuple[MarkerControllerState, list]:
    """One observation of the marker adaptation loop.

    Escalates light -> marker size -> marker pattern until the matched-feature
    percentage reaches the target, then reports Satisfied (or Exhausted once
    every escalation is spent). At most one actuation per observation.
    """
    if state.phase in (MarkerPhase.SATISFIED, MarkerPhase.EXHAUSTED):
        if report.percentage >= state.target_percentage:
            state.phase = MarkerPhase.SATISFIED
        return state, []
    if now < state.settle_until:
        return state, []
    if report.percentage >= state.target_percentage:
        state.phase = MarkerPhase.SATISFIED
        return state, []

    if state.phase is MarkerPhase.ADJUST_LIGHT:
        optimal = select_optimal_lux(texture)
        off_target = abs(measured_lux - optimal) > state.deadband_fraction * optimal
        if state.light_attempts < 2 and off_target:
            state.light_attempts += 1
            state.settle_until = now + state.settle_s
            command, _ = curve.invert(optimal)
            return state, [SetBrightness(command)]
        state.phase = MarkerPhase.ENLARGE_MARKER

    if state.phase is MarkerPhase.ENLARGE_MARKER:
        if state.current_spec.size_index < state.max_size_index:
            spec = replace(state.current_spec,
                           size_index=state.current_spec.size_index + 1)
            state.current_spec = spec
            state.settle_until = now + state.settle_s
            return state, [SetMarker(spec)]
        state.phase = MarkerPhase.SWITCH_PATTERN
        state.patterns_tried = (state.current_spec.pattern,)

    # SwitchPattern
    for pattern in PATTERN_SWITCH_ORDER:
        if pattern not in state.patterns_tried:
            state.patterns_tried = state.patterns_tried + (pattern,)
            spec = replace(state.current_spec, pattern=pattern)
            state.current_spec = spec
            state.settle_until = now + state.settle_s
            return state, [SetMarker(spec)]
    state.phase = MarkerPhase.EXHAUSTED
    return state, []


@dataclass(frozen=True)
class ControlConstraint:
    source: str
    lo: float
    hi: float
    preferred: float
    priority: int = 0

    def __post_init__(self):
        if not (self.lo <= self.preferred <= self.hi):
            raise InvalidArgumentError("preferred lux must lie within the range")
        if not (0 <= self.priority <= 3):
            raise InvalidArgumentError("priority tier must be 0..3")


def resolve_constraints(constraints: List[ControlConstraint]) -> float:
    """Intersect ranges tier by tier (highest priority first), stopping before
    a tier that would empty the intersection; clamp the top tier's preferred
    value into what remains."""
    if not constraints:
        raise InvalidArgumentError("constraint list is empty")
    tiers = sorted({c.priority for c in constraints})
    lo, hi = -math.inf, math.inf
    for tier in tiers:
        members = [c for c in constraints if c.priority == tier]
        new_lo = max([lo] + [c.lo for c in members])
        new_hi = min([hi] + [c.hi for c in members])
        if new_lo > new_hi:
            break
        lo, hi = new_lo, new_hi
    top = [c for c in constraints if c.priority == tiers[0]]
    preferred = min(c.preferred for c in top)  # lower-lux (energy-saving) bias
    return float(min(max(preferred, lo), hi))


@dataclass(frozen=True)
class TrackingPrediction:
    expected_error_cm: float
    quality: str                 # "Good" | "Poor"
    estimated: bool
    guidance: Tuple[str, ...]


def lux_band(lux: float) -> str:
    """Band label; values in the gaps between bands go to the nearer edge."""
    if lux < 0:
        raise InvalidArgumentError("lux must be >= 0")
    if lux <= 100.0:
        return "low"
    if lux < 150.0:
        return "low" if (lux - 100.0) <= (150.0 - lux) else "medium"
    if lux <= 450.0:
        return "medium"
    if lux < 500.0:
        return "medium" if (lux - 450.0) <= (500.0 - lux) else "high"
    return "high"


def predict_tracking(texture_label: str, lux: float,
                     table=None) -> TrackingPrediction:
    if table is None:
        table = DEFAULT_ERROR_TABLE
    band = lux_band(lux)
    key = (texture_label, band)
    if key not in table:
        raise InvalidArgumentError(f"unknown texture label {texture_label!r}")
    error_cm, estimated = table[key]
    quality = "Good" if error_cm <= GOOD_TRACKING_ERROR_CM else "Poor"
    guidance: List[str] = []
    if quality == "Poor":
        if band != "high":
            guidance.append("Hologram drift likely - increase light level")
        if texture_label == "fine-paper-like":
            guidance.append("Add visual texture near placement point")
        if not guidance:
            guidance.append("Reposition virtual content onto a coarser texture")
    return TrackingPrediction(error_cm, quality, estimated, tuple(guidance))
