"""Seeded dataset generation, the end-to-end pipeline, and metrics reports.

Datasets are either materialised on disk (one directory per scene) or
generated lazily in memory from the same :class:`DatasetSpec`; both give
identical scenes.  The pipeline never aborts a batch: every ground-truth
collision yields one row, failed ones carry a reason tag.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scene_sim
from .audio_event import OnsetParams, locate_onset, video_time_to_sample
from .av_correspondence import CorrespondenceParams, correspond, pairing_range
from .depth import CalibrationModel, PropagationConstants, estimate_depth
from .errors import ConfigurationError, FlashbangError, InputError, ReportError
from .io import FORMAT_VERSION, read_json, read_pgm, read_wav, write_json, write_pgm, write_wav
from .optical_flow import FlowParams
from .scene_sim import ImpactModel, NoiseSpec, SceneConfig
from .video_event import locate_video_event

log = logging.getLogger(__name__)

CSV_COLUMNS = ("scene_id", "depth_est", "depth_gt", "abs_err", "abs_rel", "fps", "event", "bucket",
               "t_video", "t_audio", "status", "reason")
BUCKETS = ("<10", "10-30", ">30")
FAILURE_REASONS = ("no-collision", "no-onset", "negative-delay", "tracking-lost")
# the second object is drawn this far to the side of the first
MULTI_X_OFFSET_PX = 70.0


def depth_bucket(depth_m: float) -> str:
    if depth_m < 10.0:
        return "<10"
    if depth_m <= 30.0:
        return "10-30"
    return ">30"


# ---------------------------------------------------------------- datasets

@dataclass
class DatasetSpec:
    n_scenes: int = 100
    depth_range_m: tuple = (2.0, 50.0)
    fps_set: tuple = (30, 60, 120, 240)
    impact_model_mix: dict = field(default_factory=lambda: {"sharp_impulse": 1.0})
    noise_sweep: list = field(default_factory=lambda: [NoiseSpec()])
    multi_collision_fraction: float = 0.0
    seed: int = 0
    # scene parameter ranges; rebounds stay inside the clip's post-collision tail
    t_hw_s: float = 0.001
    drop_height_range_m: tuple = (0.3, 0.6)
    restitution_range: tuple = (0.55, 0.8)
    horizontal_velocity_range: tuple = (0.1, 0.3)
    collision_gap_range_s: tuple = (0.15, 0.25)
    sample_rate: int = 48000

    def __post_init__(self):
        self.depth_range_m = tuple(float(x) for x in self.depth_range_m)
        self.fps_set = tuple(sorted(int(f) for f in self.fps_set))
        self.noise_sweep = [n if isinstance(n, NoiseSpec) else NoiseSpec(**n) for n in self.noise_sweep]
        if self.n_scenes <= 0:
            raise ConfigurationError("n_scenes must be positive")
        lo, hi = self.depth_range_m
        if not 0 < lo <= hi:
            raise ConfigurationError("depth_range_m must satisfy 0 < min <= max")
        if not self.fps_set or min(self.fps_set) <= 0:
            raise ConfigurationError("fps_set must hold positive frame rates")
        for name in self.impact_model_mix:
            ImpactModel(name)
        fractions = list(self.impact_model_mix.values())
        if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
            raise ConfigurationError("impact_model_mix fractions must be >= 0 and sum to 1")
        if not 0.0 <= self.multi_collision_fraction <= 1.0:
            raise ConfigurationError("multi_collision_fraction must lie in [0, 1]")
        if not self.noise_sweep:
            raise ConfigurationError("noise_sweep needs at least one entry")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["format_version"] = FORMAT_VERSION
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        data = {k: v for k, v in data.items() if k != "format_version"}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown DatasetSpec fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ScenePlan:
    scene_id: str
    base: SceneConfig
    other: SceneConfig | None = None
    t_patch: float = 0.0
    x_offset_px: float = 0.0

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "base": self.base.to_dict(),
                "other": None if self.other is None else self.other.to_dict(),
                "t_patch": self.t_patch, "x_offset_px": self.x_offset_px}

    @classmethod
    def from_dict(cls, data: dict) -> "ScenePlan":
        other = data.get("other")
        return cls(data["scene_id"], SceneConfig.from_dict(data["base"]),
                   None if other is None else SceneConfig.from_dict(other),
                   float(data.get("t_patch", 0.0)), float(data.get("x_offset_px", 0.0)))


def _counts(fractions, n):
    """Largest-remainder split of n items by fractions."""
    raw = np.asarray(fractions, dtype=float) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[:n - counts.sum()]:
        counts[i] += 1
    return counts


def plan_scenes(spec: DatasetSpec) -> list[ScenePlan]:
    """Deterministic per-scene configurations for ``spec``."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n = spec.n_scenes
    models = list(spec.impact_model_mix)
    model_of = np.repeat(np.arange(len(models)), _counts(list(spec.impact_model_mix.values()), n))
    model_of = rng.permutation(model_of)
    n_multi = int(round(spec.multi_collision_fraction * n))
    multi = np.zeros(n, dtype=bool)
    multi[rng.permutation(n)[:n_multi]] = True
    fps = max(spec.fps_set)

    plans = []
    for i in range(n):
        u = lambda r: float(rng.uniform(*r))  # noqa: E731
        base = SceneConfig(
            depth_m=u(spec.depth_range_m), drop_height_m=u(spec.drop_height_range_m),
            restitution=u(spec.restitution_range), horizontal_velocity=u(spec.horizontal_velocity_range),
            impact_model=models[model_of[i]], fps=fps, sample_rate=spec.sample_rate, t_hw_s=spec.t_hw_s,
            noise=spec.noise_sweep[i % len(spec.noise_sweep)], rng_seed=int(rng.integers(2 ** 63)))
        other, t_patch, x_off = None, 0.0, 0.0
        # draws happen for every scene so adding multi scenes never reshuffles single ones
        d2, h2, vx2 = u(spec.depth_range_m), u(spec.drop_height_range_m), u(spec.horizontal_velocity_range)
        gap = u(spec.collision_gap_range_s)
        seed2 = int(rng.integers(2 ** 63))
        if multi[i]:
            # both objects stop dead so each contributes exactly one collision
            base = dataclasses.replace(base, restitution=0.0)
            other = dataclasses.replace(base, depth_m=d2, drop_height_m=h2, horizontal_velocity=-vx2,
                                        rng_seed=seed2)
            t_patch = base.fall_time + gap - other.fall_time
            x_off = MULTI_X_OFFSET_PX
        plans.append(ScenePlan(f"scene_{i:04d}", base, other, t_patch, x_off))
    return plans


def build_scene(plan: ScenePlan) -> scene_sim.Scene:
    if plan.other is None:
        return scene_sim.simulate_scene(plan.base)
    return scene_sim.compose_scenes(plan.base, plan.other, plan.t_patch, plan.x_offset_px)


@dataclass
class SceneData:
    scene_id: str
    frames: scene_sim.FrameSequence
    audio: scene_sim.AudioClip
    truth: dict


def _truth_events(truth: dict):
    return list(zip(truth["collision_t_video"], truth["collision_depths_m"]))


class MemoryDataset:
    """Scenes generated on demand from a spec; nothing touches the disk."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self.plans = {p.scene_id: p for p in plan_scenes(spec)}
        self._cache: tuple[str, scene_sim.Scene] | None = None

    @property
    def scene_ids(self):
        return sorted(self.plans)

    @property
    def fps_set(self):
        return self.spec.fps_set

    def _scene(self, scene_id):
        if self._cache is None or self._cache[0] != scene_id:
            self._cache = (scene_id, build_scene(self.plans[scene_id]))
        return self._cache[1]

    def load(self, scene_id: str, fps: int) -> SceneData:
        scene = self._scene(scene_id)
        frames = scene.frames if fps == scene.config.fps else scene_sim.rerender(scene, fps)
        return SceneData(scene_id, frames, scene.audio, scene.ground_truth())


class DiskDataset:
    """A directory written by :func:`generate_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "dataset.json"
        if not meta_path.is_file():
            raise InputError(f"{self.root} is not a dataset directory (no dataset.json)")
        self.meta = read_json(meta_path)
        self.spec = DatasetSpec.from_dict(self.meta["spec"])

    @property
    def scene_ids(self):
        return sorted(self.meta["scenes"])

    @property
    def fps_set(self):
        return self.spec.fps_set

    def load(self, scene_id: str, fps: int) -> SceneData:
        frames, audio, truth = load_scene(self.root / scene_id, fps)
        return SceneData(scene_id, frames, audio, truth)


def write_frames(directory, frames: scene_sim.FrameSequence) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(frames.frames):
        write_pgm(directory / f"frame_{i:05d}.pgm", img)
    h, w = frames.shape
    write_json(directory / "manifest.json", {"fps": frames.fps, "width": w, "height": h,
                                             "count": len(frames)})


def read_frames(directory) -> scene_sim.FrameSequence:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    frames = [read_pgm(directory / f"frame_{i:05d}.pgm") for i in range(manifest["count"])]
    fps = manifest["fps"]
    return scene_sim.FrameSequence(frames, np.arange(len(frames)) / fps, fps)


def write_scene(directory, scene: scene_sim.Scene, plan: ScenePlan | None, fps_set) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / "config.json", plan.to_dict() if plan else scene.config.to_dict())
    write_json(directory / "ground_truth.json", scene.ground_truth())
    write_wav(directory / "audio.wav", scene.audio.samples, scene.audio.sample_rate)
    for fps in fps_set:
        frames = scene.frames if fps == scene.config.fps else scene_sim.rerender(scene, fps)
        write_frames(directory / f"fps_{fps:03d}", frames)


def load_scene(directory, fps: int | None = None):
    """(frames, audio, ground-truth dict) for one scene directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"scene directory {directory} does not exist")
    truth = read_json(directory / "ground_truth.json")
    available = sorted(int(p.name[4:]) for p in directory.glob("fps_*") if p.is_dir())
    if not available:
        raise InputError(f"{directory} holds no fps_* frame folders")
    fps = max(available) if fps is None else int(fps)
    if fps not in available:
        raise InputError(f"{directory} has no frames at {fps} fps (have {available})")
    frames = read_frames(directory / f"fps_{fps:03d}")
    samples, rate = read_wav(directory / "audio.wav")
    audio = scene_sim.AudioClip(samples, rate, truth.get("t_hw_s", 0.0), truth.get("overlapping_audio", False))
    return frames, audio, truth


def generate_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Write every planned scene under ``out_dir``; rerunning gives identical bytes."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    plans = plan_scenes(spec)
    for plan in plans:
        write_scene(out / plan.scene_id, build_scene(plan), plan, spec.fps_set)
    write_json(out / "dataset.json", {"format_version": FORMAT_VERSION, "spec": spec.to_dict(),
                                      "scenes": [p.scene_id for p in plans]})
    return out


def open_dataset(source):
    if isinstance(source, (MemoryDataset, DiskDataset)):
        return source
    if isinstance(source, DatasetSpec):
        return MemoryDataset(source)
    return DiskDataset(source)


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineConfig:
    flow: FlowParams = field(default_factory=FlowParams)
    correspondence: CorrespondenceParams = field(default_factory=CorrespondenceParams)
    onset: OnsetParams = field(default_factory=OnsetParams)
    consts: PropagationConstants = field(default_factory=PropagationConstants)
    k: int = 3
    # a ground-truth collision claims the pair whose video time is this close
    match_tolerance_s: float = 0.05

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data or {})
        parts = {"flow": FlowParams, "correspondence": CorrespondenceParams, "onset": OnsetParams,
                 "consts": PropagationConstants}
        kwargs = {}
        for key, value in data.items():
            if key in parts:
                kwargs[key] = parts[key](**value)
            elif key in ("k", "match_tolerance_s"):
                kwargs[key] = value
            else:
                raise ConfigurationError(f"unknown pipeline config field {key!r}")
        return cls(**kwargs)


@dataclass
class EventResult:
    """Outcome for one audio-visual pair."""

    frame_span: tuple
    t_video: float = math.nan
    t_audio: float = math.nan
    depth_m: float = math.nan
    status: str = "ok"
    reason: str = ""
    flagged: bool = False
    detail: dict = field(default_factory=dict)


def process_pair(frames, audio, pair, model: CalibrationModel, config: PipelineConfig) -> EventResult:
    m = pair.motion
    span = pairing_range(m, frames.fps, 1, 0.0)
    res = EventResult(span, flagged=pair.flagged)
    try:
        video = locate_video_event(frames, m.mask, m.fine_start, m.fine_stop, config.flow, config.k,
                                   initial_velocity=m.velocity)
        res.t_video = video.estimate.t_video
        res.detail["video"] = video.to_dict()
        fs = audio.sample_rate
        start = int(math.floor(video_time_to_sample(res.t_video, fs, model.t_hw_s)
                               - config.onset.guard_s * fs))
        start = max(start, pair.audio.start_sample)
        onset = locate_onset(audio, start, config.onset, search_stop=pair.audio.end_sample + 1)
        res.t_audio = onset.t_audio
        res.detail["onset"] = onset.to_dict()
        est = estimate_depth(res.t_audio, res.t_video, model, config.consts)
        res.depth_m = est.depth_m
        res.detail["depth"] = est.to_dict()
    except FlashbangError as exc:
        res.status, res.reason = "failed", exc.reason
        res.detail["error"] = str(exc)
    return res


def process_scene(data: SceneData, model: CalibrationModel, config: PipelineConfig):
    """Per-pair results plus one metrics row per ground-truth collision."""
    fps = data.frames.fps
    corr = correspond(data.frames, data.audio, config.flow, config.correspondence)
    results = [process_pair(data.frames, data.audio, p, model, config) for p in corr.pairs]

    rows = []
    claimed = set()
    for event, (t_true, depth_gt) in enumerate(_truth_events(data.truth)):
        best, best_dist = None, math.inf
        for j, r in enumerate(results):
            if j in claimed:
                continue
            if math.isfinite(r.t_video):
                dist = abs(r.t_video - t_true)
            elif r.frame_span[0] <= t_true <= r.frame_span[1]:
                dist = 0.5 * config.match_tolerance_s
            else:
                continue
            if dist <= config.match_tolerance_s and dist < best_dist:
                best, best_dist = j, dist
        row = {"scene_id": data.scene_id, "depth_gt": float(depth_gt), "fps": int(round(fps)),
               "event": event, "bucket": depth_bucket(depth_gt)}
        if best is None:
            row.update(depth_est=math.nan, t_video=math.nan, t_audio=math.nan, status="failed",
                       reason="no-collision")
        else:
            claimed.add(best)
            r = results[best]
            row.update(depth_est=r.depth_m, t_video=r.t_video, t_audio=r.t_audio, status=r.status,
                       reason=r.reason)
        if row["status"] == "ok":
            row["abs_err"] = abs(row["depth_gt"] - row["depth_est"])
            row["abs_rel"] = row["abs_err"] / row["depth_gt"]
        else:
            row["abs_err"] = row["abs_rel"] = math.nan
        rows.append(row)
    return results, rows, corr


def _run_one(args):
    dataset, scene_id, fps_list, model, config = args
    rows = []
    for fps in fps_list:
        data = dataset.load(scene_id, fps)
        try:
            _, scene_rows, _ = process_scene(data, model, config)
        except FlashbangError as exc:
            scene_rows = [{"scene_id": scene_id, "depth_gt": float(d), "fps": int(fps), "event": i,
                           "bucket": depth_bucket(d), "depth_est": math.nan, "t_video": math.nan,
                           "t_audio": math.nan, "abs_err": math.nan, "abs_rel": math.nan,
                           "status": "failed", "reason": exc.reason}
                          for i, (_, d) in enumerate(_truth_events(data.truth))]
        rows.extend(scene_rows)
    return rows


def run_pipeline(dataset, calibration: CalibrationModel | None = None,
                 config: PipelineConfig | None = None, fps=None, workers: int = 1,
                 progress=None) -> "MetricsReport":
    """Process every scene at every requested frame rate.

    Scenes are independent; with ``workers > 1`` they run in separate
    processes and rows are reassembled in scene-id order, so the report
    does not depend on scheduling.
    """
    dataset = open_dataset(dataset)
    config = config or PipelineConfig()
    model = calibration or CalibrationModel(t_hw_s=dataset.spec.t_hw_s)
    fps_list = sorted(dataset.fps_set if fps is None else (int(f) for f in fps))
    missing = set(fps_list) - set(dataset.fps_set)
    if missing:
        raise ReportError(f"dataset has no frames at {sorted(missing)} fps")
    jobs = [(dataset, sid, fps_list, model, config) for sid in dataset.scene_ids]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_one, jobs))
    else:
        chunks = []
        for job in jobs:
            chunks.append(_run_one(job))
            if progress:
                progress(job[1])
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: (r["scene_id"], r["fps"], r["event"]))
    return MetricsReport(rows)


# ----------------------------------------------------------------- metrics

def _csv_cell(value):
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return repr(value) if math.isfinite(value) else ""
    return value


def _quartiles(values) -> dict:
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=float)
    if len(v) == 0:
        return {"median": math.nan, "p25": math.nan, "p75": math.nan, "n": 0}
    p25, med, p75 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "p25": float(p25), "p75": float(p75), "n": int(len(v))}


@dataclass
class MetricsReport:
    rows: list
    improvement: dict | None = None

    def ok_rows(self, fps=None, bucket=None):
        return [r for r in self.rows if r["status"] == "ok"
                and (fps is None or r["fps"] == fps) and (bucket is None or r["bucket"] == bucket)]

    @property
    def fps_values(self):
        return sorted({r["fps"] for r in self.rows})

    def median_abs_err(self, fps=None, bucket=None) -> float:
        return _quartiles(r["abs_err"] for r in self.ok_rows(fps, bucket))["median"]

    def median_abs_rel(self, fps=None, bucket=None) -> float:
        return _quartiles(r["abs_rel"] for r in self.ok_rows(fps, bucket))["median"]

    def aggregates(self) -> dict:
        def block(fps=None, bucket=None):
            sel = [r for r in self.rows
                   if (fps is None or r["fps"] == fps) and (bucket is None or r["bucket"] == bucket)]
            ok = [r for r in sel if r["status"] == "ok"]
            reasons = {}
            for r in sel:
                if r["status"] != "ok":
                    reasons[r["reason"]] = reasons.get(r["reason"], 0) + 1
            return {"abs_err": _quartiles(r["abs_err"] for r in ok),
                    "abs_rel": _quartiles(r["abs_rel"] for r in ok),
                    "n_rows": len(sel), "n_ok": len(ok), "failures": dict(sorted(reasons.items()))}

        return {
            "all": block(),
            "per_fps": {str(f): block(fps=f) for f in self.fps_values},
            "per_bucket": {b: block(bucket=b) for b in BUCKETS},
            "per_fps_bucket": {str(f): {b: block(fps=f, bucket=b) for b in BUCKETS} for f in self.fps_values},
        }

    def to_dict(self) -> dict:
        out = {"format_version": FORMAT_VERSION, "columns": list(CSV_COLUMNS), "rows": self.rows,
               "aggregates": self.aggregates()}
        if self.improvement is not None:
            out["improvement_ratio"] = self.improvement
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([_csv_cell(r[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        write_json(json_path, self.to_dict())
        return csv_path, json_path


def improvement_ratios(rows, baseline_fps: int = 240) -> dict:
    """Frame duration over |t_video(fps) - t_video(baseline)| per scene event, summarised per fps."""
    base = {(r["scene_id"], r["event"]): r["t_video"] for r in rows
            if r["fps"] == baseline_fps and r["status"] == "ok"}
    if not base:
        raise ReportError(f"no successful {baseline_fps} fps baseline rows")
    fps_values = sorted({r["fps"] for r in rows})
    table = {}
    for fps in fps_values:
        errors, ratios, missing = [], [], 0
        for r in rows:
            if r["fps"] != fps:
                continue
            ref = base.get((r["scene_id"], r["event"]))
            if ref is None or r["status"] != "ok":
                missing += 1
                continue
            err = abs(r["t_video"] - ref)
            errors.append(err)
            # identical estimates (the baseline against itself) carry no ratio
            if err > 0:
                ratios.append((1.0 / fps) / err)
        table[str(fps)] = {
            "frame_duration_ms": 1e3 / fps,
            "median_temporal_error_ms": float(np.median(errors)) * 1e3 if errors else math.nan,
            "median_improvement_ratio": float(np.median(ratios)) if ratios else math.nan,
            "n": len(errors),
            "n_missing": missing,
        }
    return {"baseline_fps": baseline_fps, "per_fps": table}


def fps_consistency_report(dataset, config: PipelineConfig | None = None,
                           calibration: CalibrationModel | None = None, baseline_fps: int | None = None,
                           report: MetricsReport | None = None, workers: int = 1) -> dict:
    """Improvement-ratio table against the highest frame rate (240 by default)."""
    dataset = open_dataset(dataset)
    baseline_fps = baseline_fps or max(dataset.fps_set)
    if baseline_fps not in dataset.fps_set:
        raise ReportError(f"baseline {baseline_fps} fps missing from the dataset")
    if report is None:
        report = run_pipeline(dataset, calibration, config, workers=workers)
    if baseline_fps not in report.fps_values:
        raise ReportError(f"report lacks the {baseline_fps} fps baseline")
    return improvement_ratios(report.rows, baseline_fps)


def calibration_samples(report: MetricsReport):
    """(t_audio, t_video, depth_gt) from successful rows, for :func:`depth.calibrate`."""
    return [(r["t_audio"], r["t_video"], r["depth_gt"]) for r in report.ok_rows()]
