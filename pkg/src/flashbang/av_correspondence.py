"""Coarse pairing of impact sounds with collision frame windows.

Audio impacts come from a 1 ms block energy envelope.  Motion events come
from a reduced-rate copy of the video: foreground blobs against a
temporal-median background are linked into tracks, flow confirms they
move, and spikes in the third difference of each track's position
(stepped by object translations, steadier than blob centroids) mark
collisions.  Pairing is greedy and one-to-one in time order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .errors import InputError
from .io import write_json, write_pgm
from .optical_flow import FlowParams, compute_flow
from .video_event import object_translation


@dataclass(frozen=True)
class CorrespondenceParams:
    # audio
    hop_s: float = 0.001
    energy_factor: float = 6.0
    # relative floor so exact-zero (noiseless) backgrounds still get a threshold
    relative_floor: float = 1e-4
    min_separation_s: float = 0.050
    window_s: float = 0.0667
    rerise_factor: float = 4.0
    # video
    coarse_fps: float = 30.0
    foreground_threshold: float = 0.04
    min_area_px: int = 30
    max_link_px: float = 30.0
    motion_threshold_px: float = 0.5
    min_accel_change_px: float = 3.0
    noise_factor: float = 5.0
    merge_gap: int = 2
    lead_frames: int = 6
    tail_frames: int = 3
    # pairing: sound may trail the visual event by up to max_depth / v
    max_depth_m: float = 60.0
    v_sound: float = 343.0

    @property
    def max_delay_s(self) -> float:
        return self.max_depth_m / self.v_sound


@dataclass
class AudioImpactWindow:
    start_sample: int
    end_sample: int
    peak_sample: int
    peak_energy: float
    onset_sample: int
    overlapping: bool = False

    def to_dict(self) -> dict:
        return {"start_sample": self.start_sample, "end_sample": self.end_sample,
                "peak_sample": self.peak_sample, "peak_energy": self.peak_energy,
                "onset_sample": self.onset_sample, "overlapping": self.overlapping}


@dataclass
class MotionEventWindow:
    """Collision candidate on one tracked object.

    ``first_frame``/``last_frame`` bound the flagged frames in full-rate
    indices.  The front starts three coarse frames early, since the
    impulse's third difference may first clear the floor that late.  Fine
    timing runs on ``[fine_start, fine_stop)``, starting from ``mask``
    which marks the object in frame ``fine_start``.
    """

    first_frame: int
    last_frame: int
    mask: np.ndarray = field(repr=False)
    peak_accel_change: float
    fine_start: int = 0
    fine_stop: int = 0
    coarse_step: int = 1
    velocity: tuple = (0.0, 0.0)
    track_id: int = 0

    def to_dict(self) -> dict:
        return {"first_frame": self.first_frame, "last_frame": self.last_frame,
                "peak_accel_change": self.peak_accel_change, "fine_start": self.fine_start,
                "fine_stop": self.fine_stop, "coarse_step": self.coarse_step,
                "velocity": list(self.velocity), "track_id": self.track_id,
                "mask_area": int(self.mask.sum())}


@dataclass
class AVEventPair:
    audio: AudioImpactWindow
    motion: MotionEventWindow
    pairing_score: float
    # another motion event went unmatched while this sound was in its range
    contested: bool = False

    @property
    def flagged(self) -> bool:
        return self.contested or self.audio.overlapping


@dataclass
class Correspondence:
    pairs: list
    unmatched_audio: list
    unmatched_motion: list


# ------------------------------------------------------------------- audio

def block_energy(samples, hop: int) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    n = len(x) // hop
    return (x[:n * hop].reshape(n, hop) ** 2).mean(axis=1)


def detect_audio_impacts(audio, params: CorrespondenceParams | None = None) -> list[AudioImpactWindow]:
    """Energy-threshold impact windows, sorted by time."""
    params = params or CorrespondenceParams()
    samples = np.asarray(audio.samples, dtype=float)
    if len(samples) == 0:
        raise InputError("empty audio clip")
    fs = audio.sample_rate
    hop = max(int(round(params.hop_s * fs)), 1)
    env = block_energy(samples, hop)
    if len(env) == 0 or env.max() <= 0:
        return []
    thr = max(params.energy_factor * float(np.median(env)), params.relative_floor * float(env.max()))
    distance = max(int(round(params.min_separation_s / params.hop_s)), 1)
    peaks, _ = signal.find_peaks(np.concatenate([[0.0], env, [0.0]]), height=thr, distance=distance)
    peaks = peaks - 1
    length = int(round(params.window_s * fs))
    smooth = np.convolve(env, np.ones(3) / 3.0, mode="same")

    found = {}
    for p in peaks:
        above = np.flatnonzero(env[:p + 1] <= thr)
        first = int(above[-1]) + 1 if len(above) else 0
        if first in found:
            # two peaks on one above-threshold run: the sounds run into each other
            found[first]["overlapping"] = True
            if env[p] > found[first]["energy"]:
                found[first].update(peak=int(p), energy=float(env[p]))
            continue
        found[first] = {"peak": int(p), "energy": float(env[p]), "overlapping": False}

    windows = []
    for first, info in sorted(found.items()):
        onset = first * hop
        start = max(onset - length // 2, 0)
        end = min(start + length - 1, len(samples) - 1)
        p = info["peak"]
        blk = samples[p * hop:(p + 1) * hop]
        peak_sample = int(np.clip(p * hop + int(np.argmax(np.abs(blk))), start, end))
        # a second impact inside the window shows up as a re-rise of the decaying envelope
        seg = smooth[p:min(end // hop + 1, len(smooth))]
        rerise = False
        if len(seg) > 1:
            run_min = np.minimum.accumulate(seg)
            rerise = bool(np.any((seg > params.rerise_factor * run_min) & (seg > 10.0 * thr)))
        windows.append(AudioImpactWindow(start, end, peak_sample, info["energy"] / float(env.max()),
                                         onset, info["overlapping"] or rerise))
    for a, b in zip(windows, windows[1:]):
        if b.onset_sample - a.onset_sample < length:
            a.overlapping = b.overlapping = True
    return windows


# ------------------------------------------------------------------- video

def _longest_still_run(pos, spread: float) -> np.ndarray:
    """Indices of the longest consecutive run staying within ``spread`` px of its first position."""
    best = np.arange(0)
    i = 0
    while i < len(pos):
        j = i + 1
        while j < len(pos) and np.abs(pos[j] - pos[i]).max() <= spread:
            j += 1
        if j - i > len(best):
            best = np.arange(i, j)
        i = j
    return best


def estimate_background(frames, params: CorrespondenceParams, ghost_frames: int = 3,
                        ghost_spread_px: float = 0.25) -> np.ndarray:
    """Per-pixel temporal median with ghosts of resting objects repaired.

    An object resting for most of the clip ends up in the median, so in
    the frames before it arrives its resting place shows up as a blob that
    never moves.  Those frames show the true background there, and the
    background is re-estimated from them.  A still run needs
    ``ghost_frames`` frames, or two when it touches the first or last frame.
    """
    stack = np.stack([np.asarray(f, dtype=float) for f in frames]) / 255.0
    background = np.median(stack, axis=0)
    comps = [foreground_components(f, background, params) for f in frames]
    for tr in link_tracks(comps, params.max_link_px):
        # a moving object can merge with the ghost and carry its track away,
        # so only the longest stretch where the blob sits still counts
        idx = _longest_still_run(np.array(tr.centroids), ghost_spread_px)
        if len(idx) == 0:
            continue
        fr = [tr.frames[i] for i in idx]
        # a ghost shows from the clip's start (or to its end) until something covers it;
        # there a shorter run is enough
        at_edge = fr[0] == 0 or fr[-1] == len(frames) - 1
        if len(idx) < (2 if at_edge else ghost_frames):
            continue
        ghost = np.logical_or.reduce([tr.masks[i] for i in idx])
        background[ghost] = np.median(stack[fr][:, ghost], axis=0)
    return background


def foreground_components(image, background, params: CorrespondenceParams):
    """Connected foreground blobs (largest first) as (mask, centroid_xy)."""
    diff = np.abs(np.asarray(image, dtype=float) / 255.0 - background) > params.foreground_threshold
    diff = ndimage.binary_closing(diff, structure=np.ones((3, 3)))
    diff = ndimage.binary_fill_holes(diff)
    diff = ndimage.binary_opening(diff, structure=np.ones((3, 3)))
    labels, n = ndimage.label(diff)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel())[1:]
    out = []
    for i in np.argsort(-areas, kind="stable"):
        if areas[i] < params.min_area_px:
            continue
        m = labels == (i + 1)
        cy, cx = ndimage.center_of_mass(m)
        out.append((m, np.array([cx, cy])))
    return out


@dataclass
class _Track:
    frames: list = field(default_factory=list)
    centroids: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    def predict(self):
        if len(self.centroids) >= 2:
            return 2 * self.centroids[-1] - self.centroids[-2]
        return self.centroids[-1]


def link_tracks(components_per_frame, max_link_px: float) -> list[_Track]:
    """Greedy nearest-neighbour linking of per-frame blobs into tracks."""
    finished, active = [], []
    for n, comps in enumerate(components_per_frame):
        cand = sorted(((float(np.hypot(*(c - t.predict()))), ti, ci)
                       for ti, t in enumerate(active) for ci, (_, c) in enumerate(comps)),
                      key=lambda x: (x[0], x[1], x[2]))
        used_t, used_c = set(), set()
        for dist, ti, ci in cand:
            if dist > max_link_px or ti in used_t or ci in used_c:
                continue
            used_t.add(ti)
            used_c.add(ci)
            active[ti].frames.append(n)
            active[ti].centroids.append(comps[ci][1])
            active[ti].masks.append(comps[ci][0])
        next_active = []
        for ti, t in enumerate(active):
            (next_active if ti in used_t else finished).append(t)
        for ci, (m, c) in enumerate(comps):
            if ci not in used_c:
                next_active.append(_Track([n], [c], [m]))
        active = next_active
    return finished + active


def third_difference(positions) -> np.ndarray:
    """|delta a| per frame (2D norm); the first three entries are NaN."""
    p = np.asarray(positions, dtype=float)
    out = np.full(len(p), np.nan)
    if len(p) >= 4:
        d3 = p[3:] - 3 * p[2:-1] + 3 * p[1:-2] - p[:-3]
        out[3:] = np.hypot(d3[:, 0], d3[:, 1])
    return out


def _flag_groups(flags, gap):
    idx = np.flatnonzero(flags)
    groups = []
    for i in idx:
        if groups and i - groups[-1][1] <= gap + 1:
            groups[-1][1] = i
        else:
            groups.append([i, i])
    return groups


def refine_track(frames, track: _Track, max_residual: float = 0.08) -> np.ndarray:
    """Track positions re-derived from frame-to-frame object translations.

    Blob centroids jitter by about a pixel as the segmentation rim changes;
    a translation solved on the object's texture is far steadier, so the
    third difference reflects real impulses.  Steps whose solve fails keep
    the centroid step.
    """
    cents = np.asarray(track.centroids, dtype=float)
    pos = [cents[0]]
    for i in range(1, len(cents)):
        step = cents[i] - cents[i - 1]
        dx, dy, res = object_translation(frames[track.frames[i - 1]], frames[track.frames[i]],
                                         track.masks[i - 1], step)
        if res <= max_residual:
            step = np.array([dx, dy])
        pos.append(pos[-1] + step)
    return np.array(pos)


def _is_moving(frames, n, mask, guess, flow_params, threshold):
    """Median flow magnitude over the blob between coarse frames n and n+1.

    ``guess`` (the blob's centroid step) seeds the flow so fast objects stay
    within the solver's reach.
    """
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    margin = 2 * (flow_params.window_radius + 2)
    rs = slice(max(rows[0] - margin, 0), rows[-1] + margin + 1)
    cs = slice(max(cols[0] - margin, 0), cols[-1] + margin + 1)
    flow = compute_flow(frames[n][rs, cs], frames[n + 1][rs, cs], flow_params, initial=guess)
    sel = mask[rs, cs] & flow.valid
    if not sel.any():
        return False
    return float(np.median(flow.magnitude[sel])) > threshold


def _noise_level(dacc, span: int = 3) -> float:
    """Median |delta_a| with the strongest run of ``span`` transitions left out.

    One impact raises three consecutive values; on short tracks they would
    otherwise drag the median, and with it the floor, up to the impact itself.
    """
    vals = np.nan_to_num(np.abs(dacc), nan=0.0)
    finite = np.isfinite(dacc)
    if finite.sum() > span + 1:
        sums = np.convolve(vals, np.ones(span), mode="valid")
        i = int(np.argmax(sums))
        finite[i:i + span] = False
    return float(np.median(np.abs(dacc[finite])))


def detect_motion_events(frames, flow_params: FlowParams | None = None,
                         params: CorrespondenceParams | None = None) -> list[MotionEventWindow]:
    """Collision candidates from a reduced-rate copy of ``frames``, in full-rate indices."""
    params = params or CorrespondenceParams()
    flow_params = flow_params or FlowParams()
    if len(frames) < 3:
        raise InputError("need at least 3 frames")
    step = max(int(round(frames.fps / params.coarse_fps)), 1)
    coarse = frames.frames[::step]
    if len(coarse) < 4:
        return []
    background = estimate_background(coarse, params)
    comps = [foreground_components(f, background, params) for f in coarse]
    tracks = link_tracks(comps, params.max_link_px)

    events = []
    for tid, tr in enumerate(sorted(tracks, key=lambda t: (t.frames[0], t.centroids[0][0]))):
        if len(tr.frames) < 4:
            continue
        pos = refine_track(coarse, tr)
        dacc = third_difference(pos)
        floor = max(params.noise_factor * _noise_level(dacc), params.min_accel_change_px)
        flags = np.nan_to_num(dacc, nan=0.0) > floor
        for g0, g1 in _flag_groups(flags, params.merge_gap):
            m = min(max(g0 - params.lead_frames, 0), len(pos) - 2)
            step_px = pos[m + 1] - pos[m]
            if not _is_moving(coarse, tr.frames[m], tr.masks[m], step_px, flow_params,
                              params.motion_threshold_px):
                continue
            # an impulse inside (e, e+1) touches delta_a at e+1..e+3, so a group starting at g0
            # puts the last pre-collision frame no earlier than g0 - 3
            first_c = tr.frames[max(g0 - 3, 0)]
            last_c = tr.frames[g1]
            stop_c = tr.frames[min(g1 + params.tail_frames, len(tr.frames) - 1)]
            vel = step_px / step
            events.append(MotionEventWindow(
                first_frame=first_c * step, last_frame=last_c * step, mask=tr.masks[m],
                peak_accel_change=float(np.max(dacc[g0:g1 + 1])),
                fine_start=tr.frames[m] * step, fine_stop=min(stop_c * step + 1, len(frames)),
                coarse_step=step, velocity=(float(vel[0]), float(vel[1])), track_id=tid))
    events.sort(key=lambda e: (e.first_frame, e.track_id))
    return events


# ----------------------------------------------------------------- pairing

def pairing_range(motion: MotionEventWindow, fps: float, tolerance_frames: int = 1,
                  max_delay_s: float = 0.0) -> tuple[float, float]:
    """Scene-time span in which this event's sound may begin."""
    dt = tolerance_frames * motion.coarse_step / fps
    return motion.first_frame / fps - dt, motion.last_frame / fps + dt + max_delay_s


def pair_events(audio_events, motion_events, fps: float, tolerance_frames: int = 1,
                sample_rate: int = 48000, max_delay_s: float | None = None,
                audio_offset_s: float = 0.0) -> Correspondence:
    """Greedy one-to-one matching in time order.

    A sound is a candidate for a motion event when its onset falls inside
    the event's frame span widened by ``tolerance_frames`` coarse frames
    and extended by the largest plausible propagation delay.
    """
    if max_delay_s is None:
        max_delay_s = CorrespondenceParams().max_delay_s
    audio = sorted(audio_events, key=lambda a: a.onset_sample)
    motion = sorted(motion_events, key=lambda m: (m.first_frame, m.track_id))
    onset_t = [a.onset_sample / sample_rate + audio_offset_s for a in audio]
    ranges = [pairing_range(m, fps, tolerance_frames, max_delay_s) for m in motion]

    used = set()
    pairs, unmatched_motion = [], []
    for m, (lo, hi) in zip(motion, ranges):
        cand = [i for i, t in enumerate(onset_t) if lo <= t <= hi and i not in used]
        if not cand:
            unmatched_motion.append(m)
            continue
        i = cand[0]
        used.add(i)
        a = audio[i]
        a_lo = a.start_sample / sample_rate + audio_offset_s
        a_hi = a.end_sample / sample_rate + audio_offset_s
        inside = max(0.0, min(a_hi, hi) - max(a_lo, lo))
        score = inside / max(a_hi - a_lo, 1e-12)
        pairs.append(AVEventPair(a, m, score))

    for m in unmatched_motion:
        lo, hi = pairing_range(m, fps, tolerance_frames, max_delay_s)
        for p in pairs:
            t = p.audio.onset_sample / sample_rate + audio_offset_s
            if lo <= t <= hi:
                p.contested = True
    unmatched_audio = [a for i, a in enumerate(audio) if i not in used]
    return Correspondence(pairs, unmatched_audio, unmatched_motion)


def correspond(scene_frames, audio, flow_params=None, params: CorrespondenceParams | None = None,
               tolerance_frames: int = 1) -> Correspondence:
    params = params or CorrespondenceParams()
    return pair_events(detect_audio_impacts(audio, params),
                       detect_motion_events(scene_frames, flow_params, params),
                       scene_frames.fps, tolerance_frames, audio.sample_rate, params.max_delay_s,
                       audio.clock_offset_s)


def write_pairs_manifest(directory, result: Correspondence, fps: float) -> Path:
    """pairs.json plus one mask PGM per pair."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, p in enumerate(result.pairs):
        mask_name = f"pair_{i:02d}_mask.pgm"
        write_pgm(directory / mask_name, p.motion.mask.astype(np.uint8) * 255)
        entries.append({
            "audio_samples": [p.audio.start_sample, p.audio.end_sample],
            "audio": p.audio.to_dict(),
            "frames": [p.motion.first_frame, p.motion.last_frame],
            "motion": p.motion.to_dict(),
            "mask_file": mask_name,
            "pairing_score": p.pairing_score,
            "contested": p.contested,
            "overlapping": p.audio.overlapping,
        })
    path = directory / "pairs.json"
    write_json(path, {
        "fps": fps,
        "pairs": entries,
        "unmatched_audio": [a.to_dict() for a in result.unmatched_audio],
        "unmatched_motion": [m.to_dict() for m in result.unmatched_motion],
    })
    return path
