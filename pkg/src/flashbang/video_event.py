"""Sub-frame collision timing from video.

Coarse stage: track the object, find the frame pair with the strongest
acceleration change.  Fine stage: per-pixel displacement from the last
pre-collision frame (the anchor), a straight line through k frames on
each side, and the time where the two lines cross.  The collision time is
the L1-optimal consensus (median) of the per-pixel crossing times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EstimationError, InputError, NoCollisionError, TrackingError
from .optical_flow import FlowParams, compute_anchor_flows


@dataclass
class CentroidTrack:
    frame_idx: np.ndarray
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    masks: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.frame_idx)

    @property
    def positions(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        """v_t = p_t - p_{t-1}; row 0 is NaN."""
        return _diff_rows(self.positions)

    @property
    def acceleration(self) -> np.ndarray:
        """a_t = v_t - v_{t-1}; rows 0-1 are NaN."""
        return _diff_rows(self.velocity)

    @property
    def accel_change(self) -> np.ndarray:
        """delta_a_t = a_t - a_{t-1}; rows 0-2 are NaN."""
        return _diff_rows(self.acceleration)


def _diff_rows(arr):
    out = np.full_like(arr, np.nan, dtype=float)
    out[1:] = arr[1:] - arr[:-1]
    return out


@dataclass
class CollisionSplit:
    e: int
    s: int
    pre_set: list
    post_set: list
    score: float = math.nan
    static_after: bool = False


@dataclass
class PixelTrajectoryFit:
    pixel: tuple
    pre_fit: tuple    # (slope_x, slope_y, intercept_x, intercept_y), px and seconds
    post_fit: tuple
    intersection_time: float
    residual: float


@dataclass
class CollisionTimeEstimate:
    t_video: float
    per_pixel_times: np.ndarray
    inlier_count: int
    loss: float

    def summary(self, bins: int = 20) -> dict:
        times = self.per_pixel_times
        hist, edges = np.histogram(times, bins=bins) if len(times) else ([], [])
        return {
            "t_video": self.t_video,
            "inlier_count": self.inlier_count,
            "loss": self.loss,
            "per_pixel_quartiles": np.percentile(times, [25, 50, 75]).tolist() if len(times) else [],
            "histogram": {"counts": list(hist), "edges": list(edges)},
        }


# ------------------------------------------------------------------ tracking

def _translation_lk(a, b, mask, start, iterations=20, tol=1e-4):
    """Single translation aligning ``a`` (on ``mask``) into ``b``, both on a 0..1 scale.

    Gauss-Newton on the whole masked patch, the KLT tracker in its
    simplest form.  Returns (dx, dy, mean absolute residual); the
    residual is inf when the patch leaves the frame or is textureless.
    """
    gy, gx = np.gradient(a)
    ys, xs = np.nonzero(mask)
    gxm, gym, am = gx[ys, xs], gy[ys, xs], a[ys, xs]
    hess = np.array([[gxm @ gxm, gxm @ gym], [gxm @ gym, gym @ gym]])
    d = np.array(start, dtype=float)
    if np.linalg.eigvalsh(hess)[0] < 1e-6 * len(ys):
        return d[0], d[1], math.inf
    h, w = b.shape
    for _ in range(iterations):
        px, py = xs + d[0], ys + d[1]
        if px.min() < 0 or py.min() < 0 or px.max() > w - 1 or py.max() > h - 1:
            return d[0], d[1], math.inf
        err = ndimage.map_coordinates(b, [py, px], order=1, mode="nearest") - am
        step = -np.linalg.solve(hess, np.array([gxm @ err, gym @ err]))
        d += step
        if np.hypot(*step) < tol:
            break
    px, py = xs + d[0], ys + d[1]
    if px.min() < 0 or py.min() < 0 or px.max() > w - 1 or py.max() > h - 1:
        return d[0], d[1], math.inf
    err = ndimage.map_coordinates(b, [py, px], order=1, mode="nearest") - am
    return d[0], d[1], float(np.abs(err).mean())


def _robust_translation(frame_a, frame_b, mask, velocity, accept_below=math.inf, search_radius=16):
    """Translation from several starting guesses, coarse (blurred) then fine; least residual wins.

    A bounce reverses the motion, so the previous velocity alone is a poor
    start exactly when it matters.  The velocity start is tried first and
    kept if its residual is already below ``accept_below``.
    """
    a = frame_a.astype(float) / 255.0
    b = frame_b.astype(float) / 255.0
    a_blur = ndimage.gaussian_filter(a, 2.0)
    b_blur = ndimage.gaussian_filter(b, 2.0)
    vx, vy = (float(v) for v in velocity)
    starts = [(vx, vy)] + sorted({(0.0, 0.0), (vx, -vy), (-vx, vy), (vx, 0.0), (0.0, -vy)} - {(vx, vy)})
    best = (0.0, 0.0, math.inf)
    for start in starts:
        cx, cy, res = _translation_lk(a_blur, b_blur, mask, start)
        if not math.isfinite(res):
            continue
        dx, dy, res = _translation_lk(a, b, mask, (cx, cy))
        if res < best[2]:
            best = (dx, dy, res)
        if best[2] <= accept_below:
            return best
    # last resort: exhaustive integer search, then refine
    sx, sy = _search_translation(a, b, mask, search_radius)
    dx, dy, res = _translation_lk(a, b, mask, (sx, sy))
    if res < best[2]:
        best = (dx, dy, res)
    return best


def object_translation(frame_a, frame_b, mask, guess=(0.0, 0.0), accept_below: float = 0.03):
    """Translation (dx, dy, residual) of the masked object from ``frame_a`` to ``frame_b``.

    The mask is eroded by a pixel first so its fuzzy rim does not drag the
    solution towards the background.
    """
    return _robust_translation(frame_a, frame_b, _inner(np.asarray(mask, dtype=bool)), guess, accept_below)


def _search_translation(a, b, mask, radius):
    ys, xs = np.nonzero(mask)
    h, w = b.shape
    vals = a[ys, xs]
    best, best_d = math.inf, (0, 0)
    for dy in range(-radius, radius + 1):
        py = ys + dy
        if py.min() < 0 or py.max() > h - 1:
            continue
        for dx in range(-radius, radius + 1):
            px = xs + dx
            if px.min() < 0 or px.max() > w - 1:
                continue
            cost = float(np.abs(b[py, px] - vals).sum())
            if cost < best:
                best, best_d = cost, (dx, dy)
    return float(best_d[0]), float(best_d[1])


def _shift_mask(mask, dx, dy):
    return ndimage.shift(mask.astype(float), (dy, dx), order=0, mode="constant") > 0.5


def track_centroid(frames, mask, start: int = 0, stop: int | None = None,
                   initial_velocity=(0.0, 0.0), max_residual: float = 0.08) -> CentroidTrack:
    """Follow the masked object from ``start`` to ``stop`` (exclusive).

    Frame-to-frame translation is solved over the object's pixels and the
    mask is carried along with it; the centroid is the mask centroid in the
    start frame plus the accumulated translation.  ``initial_velocity``
    seeds the first step in px/frame; when no seed fits, an exhaustive
    integer search is used.
    """
    images = frames.frames
    stamps = np.asarray(frames.timestamps)
    stop = len(images) if stop is None else min(stop, len(images))
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise TrackingError("initial mask is empty", start)
    ys, xs = np.nonzero(mask)
    origin = np.array([xs.mean(), ys.mean()])
    pos = origin.copy()
    positions = [pos.copy()]
    masks = [mask]
    cur_mask = mask
    velocity = np.asarray(initial_velocity, dtype=float)
    last_res = None
    for idx in range(start + 1, stop):
        # the propagated mask is within half a pixel of the object, so the solved
        # translation is the object's own frame-to-frame motion
        template = _inner(cur_mask)
        accept = math.inf if last_res is None else 1.5 * last_res + 0.002
        if last_res is None:
            accept = 0.0
        dx, dy, res = _robust_translation(images[idx - 1], images[idx], template, velocity, accept)
        last_res = res
        if not res <= max_residual:
            raise TrackingError(f"target lost at frame {idx}", idx - 1)
        velocity = np.array([dx, dy])
        pos = pos + velocity
        applied = np.rint(pos - origin)
        cur_mask = _shift_mask(mask, *applied) if applied.any() else mask
        if cur_mask.sum() < 0.5 * mask.sum():
            raise TrackingError(f"target left the frame at {idx}", idx - 1)
        positions.append(pos.copy())
        masks.append(cur_mask)
    positions = np.array(positions)
    idxs = np.arange(start, start + len(positions))
    return CentroidTrack(idxs, stamps[idxs], positions[:, 0], positions[:, 1], masks)


def _inner(mask):
    inner = ndimage.binary_erosion(mask, iterations=1)
    return inner if inner.sum() >= 12 else mask


# --------------------------------------------------------------- coarse split

def collision_scores(track_or_positions) -> np.ndarray:
    """Impulse score per candidate last-pre-collision index e.

    An impulse inside (e, e+1) spreads over delta_a at e+1, e+2 and e+3,
    so the score of e sums |delta_a| over those three transitions.
    """
    pos = track_or_positions.positions if hasattr(track_or_positions, "positions") \
        else np.asarray(track_or_positions, dtype=float)
    n = len(pos)
    da = np.linalg.norm(np.diff(pos, n=3, axis=0), axis=1) if n >= 4 else np.zeros(0)
    # da[j] is delta_a at index j + 3
    scores = np.full(n, np.nan)
    for e in range(n):
        idx = [e + 1 - 3, e + 2 - 3, e + 3 - 3]
        if idx[0] < 0 or idx[-1] >= len(da):
            continue
        scores[e] = da[idx].sum()
    return scores


def coarse_split(track, k: int = 3, noise_factor: float = 5.0, min_change: float = 0.05,
                 static_tol: float = 0.05) -> CollisionSplit:
    """Last pre-collision frame I_e and first post-collision frame I_s = I_e+1."""
    pos = track.positions if hasattr(track, "positions") else np.asarray(track, dtype=float)
    n = len(pos)
    if n < 2 * k + 2 and n < 6:
        raise NoCollisionError(f"track too short for a split ({n} frames)")
    scores = collision_scores(pos)
    da = np.linalg.norm(np.diff(pos, n=3, axis=0), axis=1)
    finite = np.isfinite(scores)
    if not finite.any():
        raise NoCollisionError("track too short for a split")
    e = int(np.nanargmax(scores))        # first maximum wins ties: the earlier transition
    peak = float(da[e + 1 - 3:e + 4 - 3].max())
    # noise is judged on the transitions the impulse did not touch
    rest = np.delete(da, np.arange(e - 2, e + 1))
    floor = noise_factor * float(np.median(rest)) if len(rest) else 0.0
    if peak <= max(floor, min_change):
        raise NoCollisionError("no acceleration change above the noise floor")
    return _split_at(track, pos, e, k, float(scores[e]), static_tol)


def _split_at(track, pos, e, k, score, static_tol):
    n = len(pos)
    s = e + 1
    post = pos[s:s + k]
    static_after = len(post) >= 2 and float(np.ptp(post, axis=0).max()) <= static_tol
    offset = int(track.frame_idx[0]) if hasattr(track, "frame_idx") else 0
    pre_set = [offset + i for i in range(max(e - k + 1, 0), e + 1)]
    post_set = [offset + i for i in range(s, min(s + k, n))]
    return CollisionSplit(offset + e, offset + s, pre_set, post_set, score, static_after)


def _segment_sse(t, pos, degree):
    ts = t - t.mean()
    design = np.vander(ts, degree + 1)
    coef, *_ = np.linalg.lstsq(design, pos, rcond=None)
    return float(((design @ coef - pos) ** 2).sum())


def _two_segment(positions, degree):
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    t = np.arange(n, dtype=float)
    min_len = degree + 2
    best, best_e = math.inf, -1
    for e in range(min_len - 1, n - min_len):
        total = _segment_sse(t[:e + 1], pos[:e + 1], degree) + _segment_sse(t[e + 1:], pos[e + 1:], degree)
        if best_e < 0 or total < best - 1e-12 * max(best, 1.0):
            best, best_e = total, e
    return best_e, best


def two_segment_split(positions, degree: int = 2) -> int:
    """Brute-force oracle: split index e minimising the two-segment least-squares residual.

    Each side gets its own polynomial of ``degree`` per axis (2 matches
    free flight), and needs at least degree + 2 points so a wrong split
    cannot be fitted exactly.
    """
    return _two_segment(positions, degree)[0]


def least_squares_split(track, k: int = 3, degree: int = 2, min_gain: float = 4.0,
                        static_tol: float = 0.05) -> CollisionSplit:
    """Split from the two-segment fit, for tracks too noisy for the argmax rule.

    Averaging over the whole window tolerates per-frame jitter that swamps
    single third differences.  The split must cut the residual of one
    polynomial over the whole window by ``min_gain``.
    """
    pos = track.positions if hasattr(track, "positions") else np.asarray(track, dtype=float)
    n = len(pos)
    if n < 2 * (degree + 2):
        raise NoCollisionError(f"track too short for a split ({n} frames)")
    e, two = _two_segment(pos, degree)
    one = _segment_sse(np.arange(n, dtype=float), pos, degree)
    gain = one / max(two, 1e-300)
    if e < 0 or gain < min_gain:
        raise NoCollisionError(f"two-segment fit gains only {gain:.2f}x over a single trajectory")
    return _split_at(track, pos, e, k, gain, static_tol)


# ------------------------------------------------------------------ fine stage

def _line_fit(t, values):
    """OLS line per column; returns slopes, intercepts, residual RMS per column."""
    t = np.asarray(t, dtype=float)
    tc = t - t.mean()
    denom = float(tc @ tc)
    mean = values.mean(axis=0)
    slope = (tc @ (values - mean)) / denom
    intercept = mean - slope * t.mean()
    resid = values - (intercept + np.outer(t, slope))
    return slope, intercept, resid


def fit_lines(pre_t, pre_disp, post_t, post_disp, min_slope_change: float,
              max_residual: float = 0.5, noise_px: float = 0.02):
    """Vectorised per-pixel line fits and intersection times.

    ``pre_disp``/``post_disp`` have shape (frames, pixels, 2).  Returns
    (pre_slope, pre_icpt, post_slope, post_icpt, times, residual), the
    first four of shape (pixels, 2).
    """
    pre_t = np.asarray(pre_t, dtype=float)
    post_t = np.asarray(post_t, dtype=float)
    n_pix = pre_disp.shape[1]
    flat_pre = pre_disp.reshape(len(pre_t), -1)
    flat_post = post_disp.reshape(len(post_t), -1)
    s0, i0, r0 = _line_fit(pre_t, flat_pre)
    s1, i1, r1 = _line_fit(post_t, flat_post)
    s0, i0, s1, i1 = (v.reshape(n_pix, 2) for v in (s0, i0, s1, i1))
    sq = (r0 ** 2).sum(axis=0) + (r1 ** 2).sum(axis=0)
    axis_res = np.sqrt(sq / (len(pre_t) + len(post_t))).reshape(n_pix, 2)

    dslope = s0 - s1
    usable = np.abs(dslope) > min_slope_change
    with np.errstate(divide="ignore", invalid="ignore"):
        t_axis = np.where(usable, (i1 - i0) / dslope, np.nan)
        # inverse-variance weighting: timing variance ~ residual^2 / slope_change^2
        weight = np.where(usable, dslope ** 2 / (axis_res ** 2 + noise_px ** 2), 0.0)
        wsum = weight.sum(axis=1)
        times = np.where(wsum > 0, np.nansum(weight * np.nan_to_num(t_axis), axis=1) / wsum, np.nan)
    residual = np.sqrt((axis_res ** 2).mean(axis=1))
    times[residual > max_residual] = np.nan
    return s0, i0, s1, i1, times, residual


def fit_pixel_trajectories(anchor_flows, split: CollisionSplit, timestamps, k: int = 3,
                           min_slope_change: float | None = None, max_residual: float = 0.5,
                           frame_indices=None) -> list[PixelTrajectoryFit]:
    """Per-pixel pre/post lines of anchor displacement versus frame time.

    ``anchor_flows`` maps frame index to the anchor-to-frame FlowField (or
    is a list aligned with ``frame_indices``).  Only pixels valid in every
    used frame take part.
    """
    if not isinstance(anchor_flows, dict):
        if frame_indices is None:
            frame_indices = list(split.pre_set[-k:]) + list(split.post_set[:k])
        anchor_flows = dict(zip(frame_indices, anchor_flows))
    timestamps = np.asarray(timestamps, dtype=float)
    pre = [i for i in split.pre_set[-k:] if i in anchor_flows]
    post = [i for i in split.post_set[:k] if i in anchor_flows]
    if len(pre) < 2 or len(post) < 2:
        raise EstimationError("need at least two frames on each side of the collision")
    used = pre + post
    valid = np.logical_and.reduce([anchor_flows[i].valid for i in used])
    # the anchor's own (zero) field is valid wherever the mask is
    ys, xs = np.nonzero(valid)
    if len(ys) == 0:
        raise EstimationError("no pixel has valid flow in every fitting frame")
    disp = {i: np.stack([anchor_flows[i].du[ys, xs], anchor_flows[i].dv[ys, xs]], axis=-1) for i in used}
    dt = float(np.median(np.diff(timestamps))) if len(timestamps) > 1 else 1.0
    if min_slope_change is None:
        # a slope change worth less than 0.1 px per frame is too weak to intersect reliably
        min_slope_change = 0.1 / dt
    s0, i0, s1, i1, times, res = fit_lines(
        timestamps[pre], np.stack([disp[i] for i in pre]),
        timestamps[post], np.stack([disp[i] for i in post]),
        min_slope_change, max_residual)
    return [PixelTrajectoryFit((int(x), int(y)), (s0[j, 0], s0[j, 1], i0[j, 0], i0[j, 1]),
                               (s1[j, 0], s1[j, 1], i1[j, 0], i1[j, 1]), float(times[j]), float(res[j]))
            for j, (y, x) in enumerate(zip(ys, xs))]


def l1_loss(t, times) -> float:
    return float(np.abs(np.asarray(times) - t).sum())


def estimate_collision_time(fits) -> CollisionTimeEstimate:
    """L1 consensus of the per-pixel intersection times (their median)."""
    times = np.array([f.intersection_time if hasattr(f, "intersection_time") else f for f in fits],
                     dtype=float)
    times = times[np.isfinite(times)]
    if len(times) == 0:
        raise EstimationError("no pixel produced a finite intersection time")
    t_video = float(np.median(times))
    return CollisionTimeEstimate(t_video, times, len(times), l1_loss(t_video, times))


# ---------------------------------------------------------------- composition

@dataclass
class VideoEventResult:
    split: CollisionSplit
    estimate: CollisionTimeEstimate
    track: CentroidTrack
    anchor_mask: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "e": self.split.e,
            "s": self.split.s,
            "pre_set": self.split.pre_set,
            "post_set": self.split.post_set,
            "static_after": self.split.static_after,
            **self.estimate.summary(),
        }


def locate_video_event(frames, mask, start: int, stop: int, params: FlowParams | None = None,
                       k: int = 3, initial_velocity=(0.0, 0.0)) -> VideoEventResult:
    """Coarse split on a tracked window, then anchor-flow fine timing."""
    params = params or FlowParams()
    if start < 0 or stop > len(frames) or stop - start < 4:
        raise InputError(f"bad frame window [{start}, {stop})")
    track = track_centroid(frames, mask, start, stop, initial_velocity)
    try:
        split = coarse_split(track, k)
    except NoCollisionError:
        # the caller found a collision in this window; per-frame jitter can hide it from the argmax rule
        split = least_squares_split(track, k)
    e_local = split.e - start
    anchor_mask = track.masks[e_local]
    targets = [i for i in split.pre_set[-k:] + split.post_set[:k]]
    pos = track.positions
    guesses = {i: tuple(pos[i - start] - pos[e_local]) for i in targets}
    flows = compute_anchor_flows(frames, split.e, anchor_mask, params, targets, guesses)
    fits = fit_pixel_trajectories(dict(zip(targets, flows)), split, frames.timestamps, k)
    estimate = estimate_collision_time(fits)
    return VideoEventResult(split, estimate, track, anchor_mask)
