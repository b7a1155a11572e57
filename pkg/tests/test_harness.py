import csv
import filecmp
import io
import json
import math

import numpy as np
import pytest
from scipy import stats

from flashbang.depth import CalibrationModel, calibrate
from flashbang.errors import ConfigurationError, InputError, ReportError
from flashbang.harness import (BUCKETS, CSV_COLUMNS, DatasetSpec, DiskDataset, MemoryDataset, MetricsReport,
                               PipelineConfig, SceneData, calibration_samples, depth_bucket,
                               fps_consistency_report, generate_dataset, improvement_ratios, load_scene,
                               plan_scenes, process_scene, run_pipeline, write_scene)
from flashbang.scene_sim import NoiseSpec, SceneConfig, simulate_scene


@pytest.fixture(scope="module")
def small_report():
    ds = MemoryDataset(DatasetSpec(n_scenes=4, fps_set=(30, 240), seed=11))
    return ds, run_pipeline(ds)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        DatasetSpec(n_scenes=0)
    with pytest.raises(ConfigurationError):
        DatasetSpec(impact_model_mix={"sharp_impulse": 0.5, "ramped_onset": 0.4})
    with pytest.raises(ValueError):
        DatasetSpec(impact_model_mix={"thud": 1.0})
    with pytest.raises(ConfigurationError):
        DatasetSpec(depth_range_m=(5, 2))
    with pytest.raises(ConfigurationError):
        DatasetSpec.from_dict({"n_scenes": 3, "bogus": 1})


def test_spec_round_trip():
    spec = DatasetSpec(n_scenes=7, impact_model_mix={"sharp_impulse": 0.5, "ramped_onset": 0.5},
                       noise_sweep=[NoiseSpec(), NoiseSpec(1.0, 30.0, 0.0)], multi_collision_fraction=0.2)
    again = DatasetSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert plan_scenes(again) == plan_scenes(spec)


def test_plans_are_deterministic_and_seeded():
    a, b = plan_scenes(DatasetSpec(seed=5)), plan_scenes(DatasetSpec(seed=5))
    assert a == b
    assert plan_scenes(DatasetSpec(seed=6)) != a


def test_multi_collision_count():
    spec = DatasetSpec(n_scenes=100, multi_collision_fraction=0.3, seed=2)
    plans = plan_scenes(spec)
    assert sum(p.other is not None for p in plans) == 30
    multi = next(p for p in plans if p.other is not None)
    scene = MemoryDataset(spec).load(multi.scene_id, 30)
    assert len(scene.truth["collision_depths_m"]) == 2


def test_impact_model_mix_counts():
    plans = plan_scenes(DatasetSpec(n_scenes=10, impact_model_mix={"sharp_impulse": 0.33, "ramped_onset": 0.67}))
    assert sum(p.base.impact_model.value == "ramped_onset" for p in plans) == 7


def test_depths_uniform_chi_square():
    plans = plan_scenes(DatasetSpec(n_scenes=1000, seed=0))
    depths = [p.base.depth_m for p in plans]
    assert min(depths) >= 2.0 and max(depths) <= 50.0
    counts, _ = np.histogram(depths, bins=10, range=(2.0, 50.0))
    assert stats.chisquare(counts).pvalue > 0.01


def test_buckets_partition():
    assert [depth_bucket(d) for d in (2.0, 9.99, 10.0, 30.0, 30.01, 50.0)] == \
        ["<10", "<10", "10-30", "10-30", ">30", ">30"]
    assert set(BUCKETS) == {"<10", "10-30", ">30"}


def test_generation_is_byte_identical(tmp_path):
    spec = DatasetSpec(n_scenes=10, fps_set=(30, 60), seed=3)
    a, b = generate_dataset(spec, tmp_path / "a"), generate_dataset(spec, tmp_path / "b")
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 10 * 3
    _, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files_a], shallow=False)
    assert mismatch == [] and errors == []


def test_disk_and_memory_datasets_agree(tmp_path):
    spec = DatasetSpec(n_scenes=2, fps_set=(30, 60), seed=4)
    disk = DiskDataset(generate_dataset(spec, tmp_path / "d"))
    mem = MemoryDataset(spec)
    assert disk.scene_ids == mem.scene_ids
    for sid in mem.scene_ids:
        a, b = disk.load(sid, 30), mem.load(sid, 30)
        assert all(np.array_equal(x, y) for x, y in zip(a.frames.frames, b.frames.frames))
        assert np.array_equal(a.audio.samples, b.audio.samples.astype(np.float32))
        assert a.truth == json.loads(json.dumps(b.truth))


def test_dataset_errors(tmp_path):
    with pytest.raises(InputError):
        DiskDataset(tmp_path)
    with pytest.raises(InputError):
        load_scene(tmp_path / "missing")


def test_metrics_identities(small_report):
    _, report = small_report
    ok = report.ok_rows()
    assert ok
    for r in ok:
        assert r["abs_err"] == abs(r["depth_gt"] - r["depth_est"])
        # one rounding step separates the two sides
        assert np.isclose(r["abs_rel"] * r["depth_gt"], r["abs_err"], rtol=4e-16, atol=0.0)
        assert r["bucket"] == depth_bucket(r["depth_gt"])


def test_report_shape(small_report):
    ds, report = small_report
    assert report.fps_values == [30, 240]
    assert len(report.rows) == 2 * len(ds.scene_ids)
    agg = report.aggregates()
    assert set(agg["per_fps"]) == {"30", "240"}
    assert set(agg["per_bucket"]) == set(BUCKETS)
    assert agg["all"]["n_rows"] == len(report.rows)
    for block in agg["per_fps"].values():
        q = block["abs_err"]
        assert q["p25"] <= q["median"] <= q["p75"]


def test_report_determinism(small_report, tmp_path):
    ds, report = small_report
    again = run_pipeline(MemoryDataset(ds.spec))
    assert again.to_csv() == report.to_csv()
    c1, j1 = report.write(tmp_path / "a")
    c2, j2 = again.write(tmp_path / "b")
    assert c1.read_bytes() == c2.read_bytes() and j1.read_bytes() == j2.read_bytes()


def test_parallel_matches_serial(small_report):
    ds, report = small_report
    parallel = run_pipeline(MemoryDataset(ds.spec), workers=2)
    assert parallel.to_csv() == report.to_csv()


def test_csv_header_and_cells(small_report):
    _, report = small_report
    rows = list(csv.reader(io.StringIO(report.to_csv())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == len(report.rows) + 1
    for row in rows[1:]:
        float(row[CSV_COLUMNS.index("depth_gt")])
        assert "np." not in ",".join(row)


def test_improvement_ratio_table(small_report):
    _, report = small_report
    table = improvement_ratios(report.rows, 240)
    base = table["per_fps"]["240"]
    assert base["median_temporal_error_ms"] == 0.0
    assert math.isnan(base["median_improvement_ratio"])
    assert table["per_fps"]["30"]["median_improvement_ratio"] > 1.0
    with pytest.raises(ReportError):
        improvement_ratios([r for r in report.rows if r["fps"] != 240], 240)


def test_fps_report_needs_baseline(small_report):
    ds, report = small_report
    with pytest.raises(ReportError):
        fps_consistency_report(ds, baseline_fps=120, report=report)
    only30 = MetricsReport([r for r in report.rows if r["fps"] == 30])
    with pytest.raises(ReportError):
        fps_consistency_report(ds, report=only30)
    with pytest.raises(ReportError):
        run_pipeline(ds, fps=[45])
    table = fps_consistency_report(ds, report=report)
    assert table["baseline_fps"] == 240


def test_calibration_samples_recover_offset(small_report):
    _, report = small_report
    samples = [s for s, r in zip(calibration_samples(report), report.ok_rows()) if r["fps"] == 240]
    model = calibrate(samples)
    assert model.t_hw_s == pytest.approx(0.001, abs=1e-4)


def _off_screen_scene():
    # the object leaves the frame long before it lands; the sound is still recorded
    return simulate_scene(SceneConfig(depth_m=12.0, horizontal_velocity=2.0, start_x_px=150.0,
                                      restitution=0.0, fps=60, rng_seed=9))


def test_off_screen_collision_fails_with_reason():
    scene = _off_screen_scene()
    data = SceneData("off", scene.frames, scene.audio, scene.ground_truth())
    _, rows, corr = process_scene(data, CalibrationModel(0.0), PipelineConfig())
    assert len(rows) == 1
    assert rows[0]["status"] == "failed" and rows[0]["reason"] == "no-collision"
    assert len(corr.unmatched_audio) == 1 and corr.pairs == []


def test_batch_completes_past_a_failed_scene(tmp_path):
    spec = DatasetSpec(n_scenes=2, fps_set=(60,), seed=1)
    root = generate_dataset(spec, tmp_path / "d")
    write_scene(root / "scene_0000", _off_screen_scene(), None, (60,))
    report = run_pipeline(DiskDataset(root))
    by_scene = {r["scene_id"]: r for r in report.rows}
    assert by_scene["scene_0000"]["reason"] == "no-collision"
    assert by_scene["scene_0001"]["status"] == "ok"
    assert report.aggregates()["all"]["failures"] == {"no-collision": 1}


def test_pipeline_config_from_dict():
    cfg = PipelineConfig.from_dict({"k": 3, "onset": {"alpha": 0.2}, "flow": {"window_radius": 5}})
    assert cfg.onset.alpha == 0.2 and cfg.flow.window_radius == 5
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_dict({"nope": 1})
