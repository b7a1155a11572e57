"""Synthetic collision scenes: bouncing-disc physics, frame rendering, impact audio.

Clock model: the scene clock is the video clock (frame n at n / fps).
Audio sample k is taken at scene time k / sample_rate + t_hw_s.  Light
and sound delays are both applied, so the recorded readings satisfy
T_audio - T_video = d / v - d / c - t_hw_s.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, RenderError

V_SOUND = 343.0
C_LIGHT = 2.998e8

IMPACT_DECAY_S = 0.005
IMPACT_RAMP_S = 0.003
IMPACT_LENGTH_S = 0.060
# tail kept after the last collision so every impact sound fits in the recording
POST_COLLISION_S = 0.25


class ImpactModel(str, enum.Enum):
    sharp_impulse = "sharp_impulse"
    ramped_onset = "ramped_onset"


@dataclass(frozen=True)
class NoiseSpec:
    pixel_noise_sigma: float = 0.0
    audio_snr_db: float = 0.0
    centroid_jitter_px: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"{f.name} must be >= 0")


@dataclass(frozen=True)
class SceneConfig:
    depth_m: float
    drop_height_m: float = 0.4
    gravity: float = 9.8
    restitution: float = 0.6
    horizontal_velocity: float = 0.2
    object_radius_m: float = 0.1
    impact_model: ImpactModel = ImpactModel.sharp_impulse
    fps: int = 240
    sample_rate: int = 48000
    t_hw_s: float = 0.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    rng_seed: int = 0
    # rendering and propagation extras; none of these change the physics above
    duration_s: float | None = None
    v_sound: float = V_SOUND
    c_light: float = C_LIGHT
    width: int = 160
    height: int = 120
    px_per_m: float = 100.0
    start_x_px: float = 40.0
    floor_row: float = 110.0

    def __post_init__(self):
        object.__setattr__(self, "impact_model", ImpactModel(self.impact_model))
        if isinstance(self.noise, dict):
            object.__setattr__(self, "noise", NoiseSpec(**self.noise))
        if not self.depth_m > 0:
            raise ConfigurationError("depth_m must be positive")
        if self.drop_height_m < 0:
            raise ConfigurationError("drop_height_m must be non-negative")
        if not 0.0 <= self.restitution <= 1.0:
            raise ConfigurationError("restitution must lie in [0, 1]")
        if self.fps <= 0 or self.sample_rate <= 0:
            raise ConfigurationError("fps and sample_rate must be positive")
        if self.gravity <= 0 or self.object_radius_m <= 0:
            raise ConfigurationError("gravity and object_radius_m must be positive")
        if not 0 < self.v_sound < self.c_light:
            raise ConfigurationError("need 0 < v_sound < c_light")

    @property
    def fall_time(self) -> float:
        return math.sqrt(2.0 * self.drop_height_m / self.gravity)

    @property
    def focal_length_px(self) -> float:
        # zoom tracks depth so the object plane is always px_per_m pixels per metre
        return self.px_per_m * self.depth_m

    def resolved_duration(self) -> float:
        if self.duration_s is not None:
            return float(self.duration_s)
        return self.fall_time + POST_COLLISION_S

    def with_fps(self, fps: int) -> "SceneConfig":
        return dataclasses.replace(self, fps=fps)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["impact_model"] = self.impact_model.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        data = dict(data)
        data["noise"] = NoiseSpec(**data.get("noise", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown SceneConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Trajectory:
    """Piecewise-ballistic 2D motion in the vertical plane (z holds the depth).

    ``y`` is the height of the object's lowest point above the floor.
    """

    t: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    collision_times: list[float]
    # (t_start, x0, y0, vx, vy0, g) per segment; a resting segment has vy0 = g = 0
    segments: list[tuple[float, float, float, float, float, float]]
    gravity: float
    depth_m: float

    def state_at(self, t):
        """Closed-form (x, y, vx, vy) at scene time(s) ``t``."""
        t = np.asarray(t, dtype=float)
        seg = np.asarray(self.segments, dtype=float)
        idx = np.clip(np.searchsorted(seg[:, 0], t, side="right") - 1, 0, len(seg) - 1)
        t0, x0, y0, vx, vy0, g = (seg[idx, i] for i in range(6))
        dt = t - t0
        return x0 + vx * dt, y0 + vy0 * dt - 0.5 * g * dt * dt, vx + 0.0 * dt, vy0 - g * dt


def simulate_trajectory(cfg: SceneConfig, duration: float | None = None,
                        oversample: int = 10) -> Trajectory:
    """Drop from rest at ``drop_height_m`` with instantaneous bounces."""
    duration = cfg.resolved_duration() if duration is None else duration
    g = cfg.gravity
    vx = cfg.horizontal_velocity
    segments = [(0.0, 0.0, cfg.drop_height_m, vx, 0.0, g)]
    collisions = []
    t_hit = cfg.fall_time
    speed = g * t_hit
    while t_hit <= duration:
        collisions.append(t_hit)
        speed *= cfg.restitution
        x_hit = vx * t_hit
        if speed < 1e-3:
            segments.append((t_hit, x_hit, 0.0, vx, 0.0, 0.0))
            break
        segments.append((t_hit, x_hit, 0.0, vx, speed, g))
        t_hit += 2.0 * speed / g
        if len(collisions) > 1000:
            raise ConfigurationError("runaway bounce sequence")

    rate = oversample * cfg.fps
    t = np.arange(int(math.floor(duration * rate)) + 1) / rate
    traj = Trajectory(t, np.empty((len(t), 3)), np.empty((len(t), 3)), collisions,
                      segments, g, cfg.depth_m)
    x, y, vxs, vys = traj.state_at(t)
    traj.pos[:] = np.column_stack([x, y, np.full_like(x, cfg.depth_m)])
    traj.vel[:] = np.column_stack([vxs, vys, np.zeros_like(x)])
    return traj


# ---------------------------------------------------------------- rendering

@dataclass
class FrameSequence:
    frames: list
    timestamps: np.ndarray
    fps: int

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape

    def subsample(self, step: int) -> "FrameSequence":
        return FrameSequence(self.frames[::step], self.timestamps[::step], self.fps / step)


@dataclass
class Sprite:
    """One rendered object: its trajectory, when it enters, and where it is drawn."""

    trajectory: Trajectory
    cfg: SceneConfig
    t_offset: float = 0.0
    x_offset_px: float = 0.0

    @property
    def radius_px(self):
        return self.cfg.object_radius_m * self.cfg.px_per_m

    def image_center(self, t_scene):
        """Pixel centre at scene time(s) when the light left the object."""
        x, y, _, _ = self.trajectory.state_at(np.asarray(t_scene) - self.t_offset)
        u = self.cfg.start_x_px + self.x_offset_px + self.cfg.px_per_m * x
        v = self.cfg.floor_row - self.cfg.px_per_m * y - self.radius_px
        return u, v


def make_background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal((cfg.height, cfg.width))
    tex = ndimage.gaussian_filter(noise, 2.0, mode="wrap")
    tex = (tex - tex.mean()) / tex.std()
    return np.clip(0.45 + 0.12 * tex, 0.05, 0.95)


def disc_texture(r, radius):
    """Radially symmetric ring pattern on the object, 0..1 scale."""
    return 0.5 + 0.35 * np.cos(1.6 * np.pi * r / radius)


def disc_coverage(shape, center, radius):
    """Anti-aliased disc coverage with a one-pixel linear edge ramp."""
    h, w = shape
    cu, cv = center
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(xx - cu, yy - cv)
    return np.clip(radius + 0.5 - r, 0.0, 1.0), r


def draw_disc(image, center, radius):
    """Composite a textured disc into a 0..1 float image in place; returns True if visible."""
    h, w = image.shape
    cu, cv = center
    r0 = max(int(math.floor(cv - radius - 2)), 0)
    r1 = min(int(math.ceil(cv + radius + 3)), h)
    c0 = max(int(math.floor(cu - radius - 2)), 0)
    c1 = min(int(math.ceil(cu + radius + 3)), w)
    if r0 >= r1 or c0 >= c1:
        return False
    cov, r = disc_coverage((r1 - r0, c1 - c0), (cu - c0, cv - r0), radius)
    if not cov.any():
        return False
    patch = image[r0:r1, c0:c1]
    patch[:] = patch * (1.0 - cov) + disc_texture(r, radius) * cov
    return True


def frame_count(duration: float, fps: float) -> int:
    return int(math.floor(duration * fps + 1e-9)) + 1


def render_sprites(sprites, cfg: SceneConfig, duration: float, background: np.ndarray,
                   rng: np.random.Generator) -> FrameSequence:
    n = frame_count(duration, cfg.fps)
    stamps = np.arange(n) / cfg.fps
    light_delay = [s.cfg.depth_m / s.cfg.c_light for s in sprites]
    jitter = cfg.noise.centroid_jitter_px
    frames = []
    any_visible = False
    for t in stamps:
        img = background.copy()
        for sprite, delay in zip(sprites, light_delay):
            t_obj = t - delay - sprite.t_offset
            if t_obj < 0 and sprite.t_offset > 0:
                continue
            # before release the object is held at its start pose
            cu, cv = sprite.image_center(max(t - delay, sprite.t_offset))
            if jitter > 0:
                cu = cu + jitter * rng.standard_normal()
                cv = cv + jitter * rng.standard_normal()
            any_visible |= draw_disc(img, (float(cu), float(cv)), sprite.radius_px)
        img = img * 255.0
        if cfg.noise.pixel_noise_sigma > 0:
            img = img + cfg.noise.pixel_noise_sigma * rng.standard_normal(img.shape)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    if not any_visible:
        raise RenderError("object projects outside the frame for every frame")
    return FrameSequence(frames, stamps, cfg.fps)


def _streams(seed: int):
    # independent generators per concern so changing one never perturbs the others
    ss = np.random.SeedSequence(seed)
    bg, video, burst, noise = ss.spawn(4)
    return (np.random.default_rng(bg), np.random.default_rng(video),
            np.random.default_rng(burst), np.random.default_rng(noise))


def render_frames(traj: Trajectory, cfg: SceneConfig, duration: float | None = None) -> FrameSequence:
    duration = cfg.resolved_duration() if duration is None else duration
    bg_rng, video_rng, _, _ = _streams(cfg.rng_seed)
    background = make_background(cfg, bg_rng)
    return render_sprites([Sprite(traj, cfg)], cfg, duration, background, video_rng)


# -------------------------------------------------------------------- audio

@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    clock_offset_s: float = 0.0
    overlapping: bool = False

    def __len__(self):
        return len(self.samples)

    def sample_to_scene_time(self, k):
        return np.asarray(k) / self.sample_rate + self.clock_offset_s

    def scene_time_to_sample(self, t):
        return (np.asarray(t) - self.clock_offset_s) * self.sample_rate


def impact_waveform(model: ImpactModel, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-amplitude decaying noise burst; the first sample of a sharp impulse is full scale."""
    n = int(round(IMPACT_LENGTH_S * sample_rate))
    t = np.arange(n) / sample_rate
    burst = rng.uniform(-1.0, 1.0, n)
    burst[0] = 1.0
    wave = burst * np.exp(-t / IMPACT_DECAY_S)
    if ImpactModel(model) is ImpactModel.ramped_onset:
        wave *= np.minimum(t / IMPACT_RAMP_S, 1.0)
    return wave


def impact_amplitude(depth_m: float) -> float:
    return min(1.0, 1.0 / depth_m)


def onset_sample(t_collision: float, cfg: SceneConfig) -> int:
    """Audio-clock index of the first sample of an impact heard from ``cfg.depth_m``."""
    return int(round((t_collision + cfg.depth_m / cfg.v_sound - cfg.t_hw_s) * cfg.sample_rate))


def synthesize_audio(traj: Trajectory, cfg: SceneConfig, duration: float | None = None) -> AudioClip:
    if not traj.collision_times:
        raise ConfigurationError("trajectory has no collision to sonify")
    duration = cfg.resolved_duration() if duration is None else duration
    fs = cfg.sample_rate
    n = int(math.ceil(duration * fs))
    samples = np.zeros(n)
    _, _, burst_rng, noise_rng = _streams(cfg.rng_seed)
    amp = impact_amplitude(cfg.depth_m)
    wave_len = int(round(IMPACT_LENGTH_S * fs))
    starts = []
    for t_c in traj.collision_times:
        start = onset_sample(t_c, cfg)
        wave = amp * impact_waveform(cfg.impact_model, fs, burst_rng)
        starts.append(start)
        lo, hi = max(start, 0), min(start + len(wave), n)
        if lo < hi:
            samples[lo:hi] += wave[lo - start:hi - start]
    overlapping = bool(np.any(np.diff(starts) < wave_len))
    if cfg.noise.audio_snr_db > 0:
        sigma = amp * 10.0 ** (-cfg.noise.audio_snr_db / 20.0)
        samples += sigma * noise_rng.standard_normal(n)
    return AudioClip(np.clip(samples, -1.0, 1.0), fs, cfg.t_hw_s, overlapping)


# ------------------------------------------------------------------- scenes

@dataclass
class CollisionTruth:
    t_scene: float
    depth_m: float
    onset_sample: int
    object_id: int = 0
    c_light: float = C_LIGHT

    @property
    def t_video(self) -> float:
        """When the collision becomes visible in the video clock."""
        return self.t_scene + self.depth_m / self.c_light


@dataclass
class Scene:
    config: SceneConfig
    sprites: list
    duration: float
    frames: FrameSequence
    audio: AudioClip
    collisions: list

    def ground_truth(self) -> dict:
        return {
            "depth_m": self.config.depth_m,
            "collision_times": [c.t_scene for c in self.collisions],
            "collision_t_video": [c.t_video for c in self.collisions],
            "collision_depths_m": [c.depth_m for c in self.collisions],
            "collision_objects": [c.object_id for c in self.collisions],
            "onset_samples": [c.onset_sample for c in self.collisions],
            "t_hw_s": self.config.t_hw_s,
            "sample_rate": self.config.sample_rate,
            "fps": self.config.fps,
            "overlapping_audio": self.audio.overlapping,
        }


def simulate_scene(cfg: SceneConfig) -> Scene:
    duration = cfg.resolved_duration()
    traj = simulate_trajectory(cfg, duration)
    frames = render_frames(traj, cfg, duration)
    audio = synthesize_audio(traj, cfg, duration)
    truth = [CollisionTruth(t, cfg.depth_m, onset_sample(t, cfg), 0, cfg.c_light)
             for t in traj.collision_times]
    return Scene(cfg, [Sprite(traj, cfg)], duration, frames, audio, truth)


def rerender(scene: Scene, fps: int) -> FrameSequence:
    """Render the same trajectories at another frame rate (same seed, same background)."""
    cfg = scene.config.with_fps(fps)
    bg_rng, video_rng, _, _ = _streams(cfg.rng_seed)
    background = make_background(cfg, bg_rng)
    sprites = [dataclasses.replace(s, cfg=s.cfg.with_fps(fps)) for s in scene.sprites]
    return render_sprites(sprites, cfg, scene.duration, background, video_rng)


def compose_scenes(base_cfg: SceneConfig, other_cfg: SceneConfig, t_patch: float,
                   x_offset_px: float) -> Scene:
    """Patch the object and impact sound of ``other`` into ``base`` starting at ``t_patch``.

    The other object keeps its own depth, so its sound keeps its own
    propagation delay relative to its collision.  Audio segments are
    overwritten where they do not overlap an existing impact and summed
    where they do.
    """
    other_traj = simulate_trajectory(other_cfg, other_cfg.resolved_duration())
    other_hits = [t_patch + t for t in other_traj.collision_times]
    duration = max(base_cfg.resolved_duration(), max(other_hits, default=0.0) + POST_COLLISION_S)
    base_cfg = dataclasses.replace(base_cfg, duration_s=duration)
    other_cfg = dataclasses.replace(other_cfg, fps=base_cfg.fps, sample_rate=base_cfg.sample_rate,
                                    t_hw_s=base_cfg.t_hw_s, duration_s=duration - t_patch)
    base_traj = simulate_trajectory(base_cfg, duration)
    other_traj = simulate_trajectory(other_cfg, duration - t_patch)

    sprites = [Sprite(base_traj, base_cfg), Sprite(other_traj, other_cfg, t_patch, x_offset_px)]
    bg_rng, video_rng, _, _ = _streams(base_cfg.rng_seed)
    background = make_background(base_cfg, bg_rng)
    frames = render_sprites(sprites, base_cfg, duration, background, video_rng)

    audio = synthesize_audio(base_traj, base_cfg, duration)
    fs = base_cfg.sample_rate
    other_audio = synthesize_audio(other_traj, other_cfg, duration - t_patch)
    shift = int(round(t_patch * fs))
    seg_len = int(round(0.0667 * fs))
    lead = int(round(0.010 * fs))
    base_onsets = [onset_sample(t, base_cfg) for t in base_traj.collision_times]
    wave_len = int(round(IMPACT_LENGTH_S * fs))
    overlapping = audio.overlapping
    samples = audio.samples.copy()
    for t in other_traj.collision_times:
        src = onset_sample(t, other_cfg) - lead
        dst = src + shift
        lo = max(0, -src, -dst)
        hi = min(seg_len, len(other_audio.samples) - src, len(samples) - dst)
        if hi <= lo:
            continue
        segment = other_audio.samples[src + lo:src + hi]
        onset = dst + lead
        overlap = any(abs(onset - b) < wave_len for b in base_onsets)
        if overlap:
            samples[dst + lo:dst + hi] += segment
            overlapping = True
        else:
            samples[dst + lo:dst + hi] = segment
    audio = AudioClip(np.clip(samples, -1.0, 1.0), fs, base_cfg.t_hw_s, overlapping)

    truth = [CollisionTruth(t, base_cfg.depth_m, onset_sample(t, base_cfg), 0, base_cfg.c_light)
             for t in base_traj.collision_times]
    truth += [CollisionTruth(t_patch + t, other_cfg.depth_m, onset_sample(t, other_cfg) + shift, 1,
                             other_cfg.c_light)
              for t in other_traj.collision_times]
    truth.sort(key=lambda c: c.t_scene)
    return Scene(base_cfg, sprites, duration, frames, audio, truth)
