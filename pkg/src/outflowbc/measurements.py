"""Measurement data model, pressure units and net-flow accounting."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

MMHG = 1333.22  # dyn/cm^2 per mmHg
UNITS = {"mmhg": MMHG, "dyn/cm2": 1.0, "dyn/cm^2": 1.0, "dyn/cm²": 1.0}
CORONARY_FRACTION = 0.04


class MeasurementError(ValueError):
    """Invalid or inconsistent measurement data; ``field`` names the culprit."""

    def __init__(self, msg: str, field: str | None = None):
        super().__init__(f"{field}: {msg}" if field else msg)
        self.field = field


def _unit_factor(unit: str) -> float:
    try:
        return UNITS[unit.strip().lower()]
    except (KeyError, AttributeError):
        raise ValueError(f"unknown pressure unit {unit!r}; use 'mmHg' or 'dyn/cm2'") from None


def convert_pressure(value, from_unit: str, to_unit: str):
    """Scale a pressure between mmHg and dyn/cm^2."""
    return value * (_unit_factor(from_unit) / _unit_factor(to_unit))


@dataclass(frozen=True)
class PressurePair:
    systolic: float  # mmHg
    diastolic: float  # mmHg

    def __post_init__(self):
        if not (math.isfinite(self.systolic) and math.isfinite(self.diastolic)):
            raise MeasurementError("pressures must be finite", "pressure")
        if self.diastolic <= 0:
            raise MeasurementError("diastolic pressure must be positive", "pressure.diastolic_mmHg")
        if self.systolic < self.diastolic:
            raise MeasurementError("systolic below diastolic", "pressure.systolic_mmHg")


def mean_arterial_pressure(pp: PressurePair) -> float:
    """MAP in mmHg: one third systolic plus two thirds diastolic."""
    if not isinstance(pp, PressurePair):
        pp = PressurePair(*pp)
    return (pp.systolic + 2.0 * pp.diastolic) / 3.0


def correct_inlet_flow(q_ascending: float) -> float:
    """Remove the 4% coronary share from an ascending-aorta flow."""
    if not q_ascending > 0:
        raise MeasurementError("ascending flow must be positive", "inlet.flow_cm3_s")
    return (1.0 - CORONARY_FRACTION) * q_ascending


def _check_weight(w, name):
    if not (isinstance(w, (int, float)) and math.isfinite(w) and w >= 0):
        raise MeasurementError(f"weight must be finite and >= 0, got {w!r}", name)
    return float(w)


@dataclass(frozen=True)
class MeasurementSet:
    """Mean flows (cm^3/s), target pressure (dyn/cm^2) and cost weights.

    ``outlet_tags`` fixes the outlet order used everywhere else.
    """

    inlet_flow: float
    outlet_flows: tuple[float, ...]
    outlet_tags: tuple[int, ...]
    target_pressure: float
    inlet_tag: int = 1
    pressure_patch_tag: int | None = None  # None: use the inlet
    weight_pressure: float = 1.0
    weight_outlets: tuple[float, ...] | None = None
    weight_inlet: float = 1.0
    pressure_input: dict = field(default_factory=dict, compare=False)
    inlet_raw_flow: float | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "outlet_flows", tuple(float(q) for q in self.outlet_flows))
        object.__setattr__(self, "outlet_tags", tuple(int(t) for t in self.outlet_tags))
        if self.weight_outlets is None:
            object.__setattr__(self, "weight_outlets", (1.0,) * len(self.outlet_flows))
        object.__setattr__(self, "weight_outlets", tuple(
            _check_weight(w, f"outlets[{i}].weight") for i, w in enumerate(self.weight_outlets)))
        if not (math.isfinite(self.inlet_flow) and self.inlet_flow > 0):
            raise MeasurementError(f"flow must be positive, got {self.inlet_flow}", "inlet.flow_cm3_s")
        for i, q in enumerate(self.outlet_flows):
            if not (math.isfinite(q) and q > 0):
                raise MeasurementError(f"flow must be positive, got {q}", f"outlets[{i}].flow_cm3_s")
        if len(self.outlet_tags) != len(self.outlet_flows) or len(self.weight_outlets) != len(self.outlet_flows):
            raise MeasurementError("outlet tags, flows and weights differ in length", "outlets")
        if len(set(self.outlet_tags)) != len(self.outlet_tags):
            raise MeasurementError("duplicate outlet tag", "outlets")
        if not self.outlet_flows:
            raise MeasurementError("at least one outlet required", "outlets")
        if not (math.isfinite(self.target_pressure) and self.target_pressure > 0):
            raise MeasurementError("target pressure must be positive", "pressure")
        _check_weight(self.weight_pressure, "weights.pressure")
        _check_weight(self.weight_inlet, "weights.inlet")

    @property
    def n_outlets(self) -> int:
        return len(self.outlet_flows)

    @property
    def target_pressure_mmhg(self) -> float:
        return self.target_pressure / MMHG

    @property
    def pressure_tag(self) -> int:
        return self.inlet_tag if self.pressure_patch_tag is None else self.pressure_patch_tag

    def check_tags(self, tag_map) -> None:
        """Cross-check against a mesh tag map (outlet order must agree)."""
        if tuple(tag_map.outlets) != self.outlet_tags:
            raise MeasurementError(f"outlet tags {list(self.outlet_tags)} do not match mesh outlets "
                                   f"{list(tag_map.outlets)}", "outlets")
        if self.inlet_tag != tag_map.inlet:
            raise MeasurementError(f"inlet tag {self.inlet_tag} does not match mesh inlet {tag_map.inlet}",
                                   "inlet.tag")
        if self.pressure_tag not in tag_map.all_tags:
            raise MeasurementError(f"unknown pressure patch tag {self.pressure_tag}", "pressure_patch_tag")

    def with_weights(self, pressure=None, outlets=None, inlet=None) -> "MeasurementSet":
        from dataclasses import replace
        kw = {}
        if pressure is not None:
            kw["weight_pressure"] = pressure
        if outlets is not None:
            kw["weight_outlets"] = tuple(outlets)
        if inlet is not None:
            kw["weight_inlet"] = inlet
        return replace(self, **kw)

    def to_dict(self) -> dict:
        if self.pressure_input:
            pressure = dict(self.pressure_input)
        else:
            pressure = {"mean_mmHg": self.target_pressure_mmhg}
        raw = self.inlet_raw_flow
        inlet = {"tag": self.inlet_tag,
                 "flow_cm3_s": raw if raw is not None else self.inlet_flow,
                 "apply_coronary_correction": raw is not None}
        d = {
            "pressure": pressure,
            "inlet": inlet,
            "outlets": [{"tag": t, "flow_cm3_s": q, "weight": w}
                        for t, q, w in zip(self.outlet_tags, self.outlet_flows, self.weight_outlets)],
            "weights": {"pressure": self.weight_pressure, "inlet": self.weight_inlet},
        }
        if self.pressure_patch_tag is not None:
            d["pressure_patch_tag"] = self.pressure_patch_tag
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementSet":
        if not isinstance(d, dict):
            raise MeasurementError("top level must be an object")
        pr = d.get("pressure")
        if not isinstance(pr, dict):
            raise MeasurementError("missing or invalid", "pressure")
        if "mean_mmHg" in pr:
            p_mmhg = _num(pr, "mean_mmHg", "pressure.")
            pressure_input = {"mean_mmHg": p_mmhg}
        elif "systolic_mmHg" in pr and "diastolic_mmHg" in pr:
            pp = PressurePair(_num(pr, "systolic_mmHg", "pressure."), _num(pr, "diastolic_mmHg", "pressure."))
            p_mmhg = mean_arterial_pressure(pp)
            pressure_input = {"systolic_mmHg": pp.systolic, "diastolic_mmHg": pp.diastolic}
        else:
            raise MeasurementError("need mean_mmHg or systolic_mmHg + diastolic_mmHg", "pressure")
        if p_mmhg <= 0:
            raise MeasurementError("pressure must be positive", "pressure")
        inl = d.get("inlet")
        if not isinstance(inl, dict):
            raise MeasurementError("missing or invalid", "inlet")
        q_raw = _num(inl, "flow_cm3_s", "inlet.")
        if q_raw <= 0:
            raise MeasurementError(f"flow must be positive, got {q_raw}", "inlet.flow_cm3_s")
        correct = inl.get("apply_coronary_correction", False)
        if not isinstance(correct, bool):
            raise MeasurementError("must be a boolean", "inlet.apply_coronary_correction")
        q_in = correct_inlet_flow(q_raw) if correct else q_raw
        outs = d.get("outlets")
        if not isinstance(outs, list) or not outs:
            raise MeasurementError("must be a non-empty list", "outlets")
        tags, flows, weights = [], [], []
        for i, o in enumerate(outs):
            if not isinstance(o, dict):
                raise MeasurementError("must be an object", f"outlets[{i}]")
            tags.append(_int(o, "tag", f"outlets[{i}]."))
            q = _num(o, "flow_cm3_s", f"outlets[{i}].")
            if q <= 0:
                raise MeasurementError(f"flow must be positive, got {q}", f"outlets[{i}].flow_cm3_s")
            flows.append(q)
            weights.append(_num(o, "weight", f"outlets[{i}].") if "weight" in o else 1.0)
        w = d.get("weights", {}) or {}
        if not isinstance(w, dict):
            raise MeasurementError("must be an object", "weights")
        return cls(
            inlet_flow=q_in,
            outlet_flows=tuple(flows),
            outlet_tags=tuple(tags),
            target_pressure=p_mmhg * MMHG,
            inlet_tag=_int(inl, "tag", "inlet.") if "tag" in inl else 1,
            pressure_patch_tag=_int(d, "pressure_patch_tag", "") if "pressure_patch_tag" in d else None,
            weight_pressure=_num(w, "pressure", "weights.") if "pressure" in w else 1.0,
            weight_outlets=tuple(weights),
            weight_inlet=_num(w, "inlet", "weights.") if "inlet" in w else 1.0,
            pressure_input=pressure_input,
            inlet_raw_flow=q_raw if correct else None,
        )


def _num(d: dict, key: str, prefix: str) -> float:
    if key not in d:
        raise MeasurementError("missing", prefix + key)
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise MeasurementError(f"expected a finite number, got {v!r}", prefix + key)
    return float(v)


def _int(d: dict, key: str, prefix: str) -> int:
    v = d.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise MeasurementError(f"expected an integer tag, got {v!r}", prefix + key)
    return v


def load_measurements(path, tag_map=None) -> MeasurementSet:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeasurementError(f"JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    ms = MeasurementSet.from_dict(data)
    if tag_map is not None:
        ms.check_tags(tag_map)
    return ms


def save_measurements(ms: MeasurementSet, path) -> None:
    Path(path).write_text(json.dumps(ms.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class NetFlowReport:
    inlet_total: float
    outlet_total: float
    net_flow: float
    violation_fraction: float

    @property
    def violation_percent(self) -> float:
        return 100.0 * self.violation_fraction


def net_flow_report(ms: MeasurementSet) -> NetFlowReport:
    q_out = math.fsum(ms.outlet_flows)
    net = ms.inlet_flow - q_out
    return NetFlowReport(ms.inlet_flow, q_out, net, abs(net) / ms.inlet_flow)
