"""Acoustic onset localisation around a video-derived collision time.

Onsets come from a causal short-window energy envelope: the first point
where it crosses a fraction of the local peak, walked back to where the
envelope last sat at the noise floor.  With a causal window the envelope
of a noiseless recording is exactly zero before the first sound sample,
so a sharp impulse is recovered to the sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NoOnsetError
from .io import write_json

CLIP_LENGTH = 1600
HIGHLIGHT_LENGTH = 24


@dataclass
class HighlightedClip:
    samples: np.ndarray
    highlight: np.ndarray
    base_sample_index: int
    clipped: bool = False

    @property
    def highlight_center(self) -> float:
        idx = np.flatnonzero(self.highlight)
        return self.base_sample_index + 0.5 * (idx[0] + idx[-1])


@dataclass
class AudioOnset:
    t_audio: float
    onset_sample: int
    confidence: float
    peak_sample: int = -1
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "onset_sample": self.onset_sample,
            "t_audio": self.t_audio,
            "confidence": self.confidence,
            "peak_sample": self.peak_sample,
            "flags": dict(self.flags),
        }


@dataclass(frozen=True)
class OnsetParams:
    alpha: float = 0.1
    smoothing_s: float = 0.0005
    # floor = floor_factor * median envelope of the search region
    floor_factor: float = 3.0
    # the local peak must stand this far above the region median
    min_peak_ratio: float = 6.0
    # span after the first detection in which the local peak is taken
    peak_span_s: float = 0.020
    max_depth_m: float = 60.0
    v_sound: float = 343.0
    guard_s: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.smoothing_s <= 0 or self.max_depth_m <= 0 or self.v_sound <= 0:
            raise ValueError("smoothing_s, max_depth_m and v_sound must be positive")

    @property
    def max_delay_s(self) -> float:
        return self.max_depth_m / self.v_sound


def _samples_and_rate(audio):
    if isinstance(audio, HighlightedClip):
        raise InputError("pass the AudioClip; a HighlightedClip carries no sample rate")
    return np.asarray(audio.samples, dtype=float), int(audio.sample_rate), float(audio.clock_offset_s)


def video_time_to_sample(t_video: float, sample_rate: int, t_hw_s: float) -> float:
    """Audio-clock sample index at which the video timestamp falls (fractional)."""
    return (t_video - t_hw_s) * sample_rate


def build_highlighted_clip(audio, t_video: float, length: int = CLIP_LENGTH,
                           highlight: int = HIGHLIGHT_LENGTH, position: float = 0.25,
                           center_sample: float | None = None) -> HighlightedClip:
    """Fixed-length excerpt with the samples nearest the mapped video time marked.

    The highlight sits at ``position`` of the clip so most of the excerpt
    follows the visual event, where the sound must be.  ``center_sample``
    overrides the mapped video time, e.g. to centre on a detected onset.
    Out-of-range parts are zero padded and flagged as clipped.
    """
    samples, fs, offset = _samples_and_rate(audio)
    if length < highlight or highlight < 1:
        raise ValueError("need 1 <= highlight <= length")
    center = video_time_to_sample(t_video, fs, offset) if center_sample is None else center_sample
    center = int(round(center))
    hl_start = center - highlight // 2
    base = hl_start - int(round(position * length)) + highlight // 2
    out = np.zeros(length)
    lo, hi = max(base, 0), min(base + length, len(samples))
    if lo < hi:
        out[lo - base:hi - base] = samples[lo:hi]
    mask = np.zeros(length, dtype=bool)
    mask[hl_start - base:hl_start - base + highlight] = True
    return HighlightedClip(out, mask, base, clipped=bool(base < 0 or base + length > len(samples)))


def energy_envelope(samples, window: int) -> np.ndarray:
    """Causal moving average of the squared signal; exact zeros stay zero."""
    sq = np.asarray(samples, dtype=float) ** 2
    return np.convolve(sq, np.full(window, 1.0 / window))[:len(sq)]


def locate_onset(audio, search_start: int, params: OnsetParams | None = None,
                 search_stop: int | None = None) -> AudioOnset:
    """First impact onset at or after ``search_start`` (absolute audio-clock samples).

    ``search_stop`` defaults to the latest sample an impact from the
    configured maximum depth could arrive at, plus a guard.
    """
    params = params or OnsetParams()
    samples, fs, offset = _samples_and_rate(audio)
    if search_stop is None:
        search_stop = search_start + int(math.ceil((params.max_delay_s + 2 * params.guard_s) * fs))
    lo = max(int(search_start), 0)
    hi = min(int(search_stop), len(samples))
    if hi - lo < 2:
        raise InputError(f"empty search region [{search_start}, {search_stop})")

    window = max(int(round(params.smoothing_s * fs)), 1)
    # start the envelope a window early so the first searched value is not truncated
    pre = min(window, lo)
    env = energy_envelope(samples[lo - pre:hi], window)[pre:]
    med = float(np.median(env))
    top = float(env.max())
    if top <= 0.0 or top <= params.min_peak_ratio * med:
        raise NoOnsetError(f"no onset in samples [{lo}, {hi})")
    floor = max(params.floor_factor * med, 1e-12 * top)
    detect = max(params.min_peak_ratio * med, 1e-6 * top)

    first = int(np.argmax(env > detect))
    span = max(int(round(params.peak_span_s * fs)), 1)
    peak = first + int(np.argmax(env[first:first + span]))
    # start of the above-level run holding the peak; in noise alpha*peak can sit under the floor
    level = max(params.alpha * env[peak], floor)
    below = np.flatnonzero(env[:peak + 1] < level)
    cross = int(below[-1]) + 1 if len(below) else 0
    quiet = np.flatnonzero(env[:cross + 1] <= floor)
    onset = int(quiet[-1]) + 1 if len(quiet) else 0
    onset = min(onset, cross)
    flags = {"region_start_clipped": search_start < 0, "region_end_clipped": search_stop > len(samples)}
    return AudioOnset(t_audio=(lo + onset) / fs, onset_sample=lo + onset,
                      confidence=float(env[peak] / floor), peak_sample=lo + peak, flags=flags)


def onset_report(onset: AudioOnset, clip: HighlightedClip | None = None) -> dict:
    report = onset.to_dict()
    if clip is not None:
        report["flags"] = {**report["flags"], "clip_clipped": clip.clipped}
        report["clip_base_sample"] = clip.base_sample_index
    return report


def write_onset_report(path, onset: AudioOnset, clip: HighlightedClip | None = None) -> None:
    write_json(path, onset_report(onset, clip))
