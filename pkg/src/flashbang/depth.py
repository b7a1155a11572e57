"""Depth from the light/sound arrival gap, and calibration of the clock offset."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ConfigurationError, NegativeDelayError
from .io import FORMAT_VERSION, read_json, write_json

V_EFF_RANGE = (320.0, 360.0)


@dataclass(frozen=True)
class PropagationConstants:
    v_sound: float = 343.0
    c_light: float = 2.998e8

    def __post_init__(self):
        if not 0.0 < self.v_sound < self.c_light:
            raise ConfigurationError("need 0 < v_sound < c_light")

    @property
    def slowness_gap(self) -> float:
        """Seconds of delay per metre of depth: 1/v - 1/c."""
        return 1.0 / self.v_sound - 1.0 / self.c_light


@dataclass
class CalibrationModel:
    t_hw_s: float = 0.0
    v_eff: float | None = None
    residual_ms: float = 0.0
    n_samples: int = 0

    def __post_init__(self):
        if not math.isfinite(self.t_hw_s):
            raise CalibrationError("t_hw_s must be finite")

    def constants(self, consts: PropagationConstants | None = None) -> PropagationConstants:
        consts = consts or PropagationConstants()
        if self.v_eff is None:
            return consts
        return PropagationConstants(self.v_eff, consts.c_light)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "t_hw_s": self.t_hw_s,
            "v_eff": self.v_eff,
            "residual_ms": self.residual_ms,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationModel":
        return cls(float(data["t_hw_s"]), data.get("v_eff"), float(data.get("residual_ms", 0.0)),
                   int(data.get("n_samples", 0)))

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "CalibrationModel":
        return cls.from_dict(read_json(path))


@dataclass
class DepthEstimate:
    depth_m: float
    T_s: float
    t_audio: float
    t_video: float
    t_hw_s: float

    def to_dict(self) -> dict:
        return {"depth_m": self.depth_m, "T_s": self.T_s, "t_audio": self.t_audio,
                "t_video": self.t_video, "t_hw_s": self.t_hw_s}


def depth_from_delay(T, consts: PropagationConstants | None = None, approximate: bool = False):
    """d = c v T / (c - v), or v T with ``approximate``.  Works on arrays."""
    consts = consts or PropagationConstants()
    T_arr = np.asarray(T, dtype=float)
    if np.any(~(T_arr > 0)):
        raise NegativeDelayError(f"delay must be positive, got {T}")
    v, c = consts.v_sound, consts.c_light
    d = v * T_arr if approximate else c * v * T_arr / (c - v)
    return float(d) if d.ndim == 0 else d


def estimate_depth(t_audio: float, t_video: float, model: CalibrationModel | None = None,
                   consts: PropagationConstants | None = None, label: str = "") -> DepthEstimate:
    model = model or CalibrationModel()
    T = t_audio - t_video + model.t_hw_s
    if not T > 0:
        where = f" for {label}" if label else ""
        raise NegativeDelayError(f"non-positive delay T = {T * 1e3:.3f} ms{where}: "
                                 "audio onset precedes the visual event, pair is likely wrong")
    d = depth_from_delay(T, model.constants(consts))
    return DepthEstimate(d, T, t_audio, t_video, model.t_hw_s)


def calibrate(samples, fit_v: bool = False, consts: PropagationConstants | None = None) -> CalibrationModel:
    """Fit the clock offset (and optionally the sound speed) from labelled runs.

    ``samples`` are (t_audio, t_video, depth_m) triples.  The model is
    (t_audio - t_video) = d (1/v - 1/c) - t_hw.
    """
    consts = consts or PropagationConstants()
    arr = np.asarray(list(samples), dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(arr)):
        raise CalibrationError("calibration samples must be finite")
    n = len(arr)
    if n < (3 if fit_v else 2):
        raise CalibrationError(f"need at least {3 if fit_v else 2} samples, got {n}")
    delta = arr[:, 0] - arr[:, 1]
    depth = arr[:, 2]

    if not fit_v:
        t_hw = float(np.mean(depth * consts.slowness_gap - delta))
        resid = delta - (depth * consts.slowness_gap - t_hw)
        return CalibrationModel(t_hw, None, float(np.sqrt(np.mean(resid ** 2)) * 1e3), n)

    if np.ptp(depth) <= 1e-9 * max(np.abs(depth).max(), 1.0):
        raise CalibrationError("all samples share one depth; sound speed is not identifiable")
    A = np.column_stack([depth, np.ones(n)])
    (slope, intercept), *_ = np.linalg.lstsq(A, delta, rcond=None)
    slowness = slope + 1.0 / consts.c_light
    if slowness <= 0:
        raise CalibrationError(f"fitted slope {slope:.3e} s/m implies a non-physical sound speed")
    v_eff = 1.0 / slowness
    if not V_EFF_RANGE[0] <= v_eff <= V_EFF_RANGE[1]:
        raise CalibrationError(f"fitted sound speed {v_eff:.1f} m/s outside {V_EFF_RANGE}")
    resid = delta - A @ np.array([slope, intercept])
    return CalibrationModel(float(-intercept), float(v_eff), float(np.sqrt(np.mean(resid ** 2)) * 1e3), n)
