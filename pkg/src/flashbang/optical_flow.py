"""Dense pyramidal Lucas-Kanade optical flow.

Each pixel gets its own windowed least-squares solve of
``grad_x * du + grad_y * dv = -grad_t``.  Levels are processed coarse to
fine, with frame_b warped by the current estimate before every
iteration.  Intensities are handled on a 0..1 scale, so ``min_eigenvalue``
is in (intensity per pixel)^2 on that scale.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InputError
from .io import write_json, write_pgm


@dataclass(frozen=True)
class FlowParams:
    window_radius: int = 7
    pyramid_levels: int = 3
    iterations_per_level: int = 5
    min_eigenvalue: float = 1e-3
    # mean absolute photometric residual (0..1 scale) above which a pixel is rejected
    max_residual: float = 0.06

    def __post_init__(self):
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be >= 1")


@dataclass
class FlowField:
    du: np.ndarray
    dv: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.du.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.du, self.dv)

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=bool))


def _as_gray(frame) -> np.ndarray:
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim != 2:
        raise InputError(f"expected a 2D grayscale frame, got shape {img.shape}")
    return img / 255.0


def _gradients(img):
    gy, gx = np.gradient(img)
    return gx, gy


def _pyramid(img, levels):
    out = [img]
    for _ in range(levels - 1):
        prev = out[-1]
        if min(prev.shape) < 16:
            break
        out.append(ndimage.gaussian_filter(prev, 1.0, mode="nearest")[::2, ::2])
    return out


def _upsample(field, shape):
    # coarse pixel j sits at fine pixel 2j
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return ndimage.map_coordinates(field, [yy / 2.0, xx / 2.0], order=1, mode="nearest")


def _initial_fields(initial, shape):
    if initial is None:
        return np.zeros(shape), np.zeros(shape)
    if isinstance(initial, FlowField):
        return initial.du.astype(float), initial.dv.astype(float)
    init = np.asarray(initial, dtype=float)
    if init.shape == (2,):
        return np.full(shape, init[0]), np.full(shape, init[1])
    du, dv = initial
    return np.asarray(du, dtype=float), np.asarray(dv, dtype=float)


def compute_flow(frame_a, frame_b, params: FlowParams | None = None, initial=None) -> FlowField:
    """Flow from ``frame_a`` to ``frame_b``: frame_b(x + du, y + dv) ~ frame_a(x, y).

    ``initial`` optionally seeds the estimate, either as a FlowField, a
    (du, dv) pair of arrays, or a constant 2-vector.
    """
    params = params or FlowParams()
    a = _as_gray(frame_a)
    b = _as_gray(frame_b)
    if a.shape != b.shape:
        raise InputError(f"frame shapes differ: {a.shape} vs {b.shape}")

    pyr_a = _pyramid(a, params.pyramid_levels)
    pyr_b = _pyramid(b, params.pyramid_levels)
    n_levels = len(pyr_a)
    # Gaussian window: a box window's negative sidelobes make the coupled dense iteration diverge
    window = partial(ndimage.gaussian_filter, sigma=params.window_radius / 2.0, truncate=2.0,
                     mode="nearest")

    du0, dv0 = _initial_fields(initial, a.shape)
    step = 2 ** (n_levels - 1)
    du = du0[::step, ::step] / step
    dv = dv0[::step, ::step] / step

    for level in range(n_levels - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if du.shape != la.shape:
            du = 2.0 * _upsample(du, la.shape)
            dv = 2.0 * _upsample(dv, la.shape)
        h, w = la.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        ax, ay = _gradients(la)
        for _ in range(params.iterations_per_level):
            warped = ndimage.map_coordinates(lb, [yy + dv, xx + du], order=1, mode="nearest")
            bx, by = _gradients(warped)
            gx = 0.5 * (ax + bx)
            gy = 0.5 * (ay + by)
            grad_t = warped - la
            grad_t[(xx + du < 0) | (xx + du > w - 1) | (yy + dv < 0) | (yy + dv > h - 1)] = 0.0
            sxx, sxy, syy = window(gx * gx), window(gx * gy), window(gy * gy)
            det = sxx * syy - sxy * sxy
            ok = det > 1e-12
            inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            rx = -window(gx * grad_t)
            ry = -window(gy * grad_t)
            du = du + (syy * rx - sxy * ry) * inv_det
            dv = dv + (sxx * ry - sxy * rx) * inv_det

    sxx, sxy, syy = window(ax * ax), window(ax * ay), window(ay * ay)
    half_trace = 0.5 * (sxx + syy)
    min_eig = half_trace - np.sqrt(np.maximum(half_trace ** 2 - (sxx * syy - sxy * sxy), 0.0))
    solvable = min_eig >= params.min_eigenvalue
    warped = ndimage.map_coordinates(pyr_b[0], [yy + dv, xx + du], order=1, mode="nearest")
    residual = window(np.abs(warped - pyr_a[0]))
    inside = (xx + du >= 0) & (xx + du <= w - 1) & (yy + dv >= 0) & (yy + dv <= h - 1)
    valid = solvable & inside & (residual <= params.max_residual)
    valid &= np.isfinite(du) & np.isfinite(dv)
    du = np.where(valid, du, 0.0)
    dv = np.where(valid, dv, 0.0)
    return FlowField(du, dv, valid)


def _mask_roi(mask, margin, shape):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0 = max(rows[0] - margin, 0)
    r1 = min(rows[-1] + margin + 1, shape[0])
    c0 = max(cols[0] - margin, 0)
    c1 = min(cols[-1] + margin + 1, shape[1])
    return slice(r0, r1), slice(c0, c1)


def compute_anchor_flows(frames, anchor_idx: int, mask, params: FlowParams | None = None,
                         targets=None, initial=None) -> list[FlowField]:
    """Flow from the anchor frame directly to each target frame, kept on ``mask``.

    Every target is solved independently against the anchor; nothing is
    chained.  ``targets`` defaults to every frame in the sequence.
    ``initial`` may map a target index to a constant (dx, dy) guess, e.g.
    from a tracker.  A seeded target is solved at full resolution only:
    at coarse levels a small object is swamped by static background that
    would drag the seed back towards zero.
    """
    params = params or FlowParams()
    images = frames.frames if hasattr(frames, "frames") else frames
    if not 0 <= anchor_idx < len(images):
        raise InputError(f"anchor index {anchor_idx} outside 0..{len(images) - 1}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InputError("anchor mask is empty")
    targets = range(len(images)) if targets is None else targets
    initial = initial or {}
    anchor = images[anchor_idx]

    out = []
    seeded = dataclasses.replace(params, pyramid_levels=1)
    for idx in targets:
        level_params = seeded if idx in initial else params
        guess = np.asarray(initial.get(idx, (0.0, 0.0)), dtype=float)
        margin = (int(math.ceil(np.abs(guess).max()))
                  + (params.window_radius + 2) * 2 ** (level_params.pyramid_levels - 1))
        rs, cs = _mask_roi(mask, margin, mask.shape)
        local = compute_flow(anchor[rs, cs], images[idx][rs, cs], level_params, initial=guess)
        # pixels near the crop edge see a truncated neighbourhood, which is why the margin is generous
        field = FlowField.zeros(mask.shape)
        field.du[rs, cs] = local.du
        field.dv[rs, cs] = local.dv
        field.valid[rs, cs] = local.valid
        field.valid &= mask
        field.du[~field.valid] = 0.0
        field.dv[~field.valid] = 0.0
        out.append(field)
    return out


def moving_components(flow: FlowField, magnitude_threshold: float, min_area: int = 1):
    """All connected moving regions, largest first."""
    moving = flow.valid & (flow.magnitude > magnitude_threshold)
    moving = ndimage.binary_opening(moving, structure=np.ones((3, 3)))
    labels, n = ndimage.label(moving)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel())[1:]
    order = np.argsort(-areas, kind="stable")
    return [labels == (i + 1) for i in order if areas[i] >= min_area]


def moving_mask(flow: FlowField, magnitude_threshold: float) -> np.ndarray:
    """Largest connected region whose flow magnitude exceeds the threshold."""
    comps = moving_components(flow, magnitude_threshold)
    if not comps:
        return np.zeros(flow.shape, dtype=bool)
    return comps[0]


def dump_flow(flow: FlowField, directory, stem: str, scale: float = 16.0) -> None:
    """Debug dump: du/dv as offset-encoded PGMs (128 + scale * d) plus metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, field in (("du", flow.du), ("dv", flow.dv)):
        write_pgm(directory / f"{stem}_{name}.pgm", np.clip(128.0 + scale * field, 0, 255))
    write_json(directory / f"{stem}.json", {
        "height": flow.shape[0],
        "width": flow.shape[1],
        "offset": 128,
        "scale": scale,
        "valid_fraction": float(flow.valid.mean()),
        "files": {"du": f"{stem}_du.pgm", "dv": f"{stem}_dv.pgm"},
    })
