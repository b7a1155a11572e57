import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flashbang.errors import ConfigurationError, RenderError
from flashbang.scene_sim import (AudioClip, NoiseSpec, SceneConfig, Sprite, compose_scenes, disc_coverage,
                                 make_background, onset_sample, render_frames, render_sprites,
                                 rerender, simulate_scene, simulate_trajectory, synthesize_audio)


def euler_first_impact(h, g, dt=1e-6):
    # semi-implicit Euler fall from rest; returns the crossing time of y = 0
    y, v, t = h, 0.0, 0.0
    while True:
        v_new = v - g * dt
        y_new = y + v_new * dt
        if y_new <= 0.0:
            return t + dt * y / (y - y_new)
        y, v, t = y_new, v_new, t + dt


def test_free_fall_collision_time_matches_euler_oracle():
    cfg = SceneConfig(depth_m=10.0, drop_height_m=1.0, restitution=0.0, horizontal_velocity=0.0)
    traj = simulate_trajectory(cfg)
    assert len(traj.collision_times) == 1
    assert traj.collision_times[0] == pytest.approx(math.sqrt(2.0 / 9.8), abs=1e-12)
    assert traj.collision_times[0] == pytest.approx(euler_first_impact(1.0, 9.8), abs=1e-5)
    # at rest afterwards
    x, y, vx, vy = traj.state_at(np.array([0.5, 0.6, 0.7]))
    assert np.all(y == 0.0) and np.all(vy == 0.0)


@given(h=st.floats(0.1, 2.0), e=st.floats(0.1, 0.95))
def test_first_rebound_apex_is_e_squared_h(h, e):
    cfg = SceneConfig(depth_m=5.0, drop_height_m=h, restitution=e, horizontal_velocity=0.0, duration_s=10.0)
    traj = simulate_trajectory(cfg)
    t1, t2 = traj.collision_times[:2]
    _, apex, _, _ = traj.state_at(0.5 * (t1 + t2))
    assert apex == pytest.approx(e * e * h, rel=1e-9)


def test_elastic_bounces_are_equally_spaced():
    cfg = SceneConfig(depth_m=5.0, drop_height_m=0.5, restitution=1.0, duration_s=3.0)
    gaps = np.diff(simulate_trajectory(cfg).collision_times)
    assert len(gaps) >= 3
    np.testing.assert_allclose(gaps, gaps[0], rtol=1e-12)


@given(h=st.floats(0.2, 1.5), e=st.floats(0.2, 0.9))
def test_apex_heights_strictly_decrease(h, e):
    cfg = SceneConfig(depth_m=5.0, drop_height_m=h, restitution=e, duration_s=3.0)
    traj = simulate_trajectory(cfg)
    ct = traj.collision_times
    apexes = [traj.state_at(0.5 * (a + b))[1] for a, b in zip(ct, ct[1:])]
    assert all(b < a for a, b in zip(apexes, apexes[1:]))
    assert all(a < h for a in apexes)


def test_ballistic_closed_form_between_collisions():
    cfg = SceneConfig(depth_m=5.0, drop_height_m=0.5, restitution=0.7, duration_s=1.5)
    traj = simulate_trajectory(cfg)
    assert np.all(np.diff(traj.t) > 0)
    assert len(traj.t) >= 10 * cfg.fps * 1.5
    t1, t2 = traj.collision_times[:2]
    v0 = 0.7 * 9.8 * t1
    sel = (traj.t > t1) & (traj.t < t2)
    dt = traj.t[sel] - t1
    np.testing.assert_allclose(traj.pos[sel, 1], v0 * dt - 0.5 * 9.8 * dt ** 2, atol=1e-9)
    pre = traj.t < t1
    np.testing.assert_allclose(traj.pos[pre, 1], 0.5 - 0.5 * 9.8 * traj.t[pre] ** 2, atol=1e-9)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SceneConfig(depth_m=5.0, drop_height_m=-1.0)
    with pytest.raises(ConfigurationError):
        SceneConfig(depth_m=0.0)
    with pytest.raises(ConfigurationError):
        SceneConfig(depth_m=5.0, restitution=1.5)
    with pytest.raises(ConfigurationError):
        NoiseSpec(pixel_noise_sigma=-1.0)
    with pytest.raises(ConfigurationError):
        SceneConfig.from_dict({"depth_m": 3.0, "colour": "red"})


def test_config_json_round_trip():
    cfg = SceneConfig(depth_m=12.5, impact_model="ramped_onset", noise=NoiseSpec(1.0, 30.0, 0.1), rng_seed=7)
    assert SceneConfig.from_dict(cfg.to_dict()) == cfg


def test_determinism_bit_identical():
    cfg = SceneConfig(depth_m=20.0, fps=60, noise=NoiseSpec(2.0, 30.0, 0.2), rng_seed=123)
    a, b = simulate_scene(cfg), simulate_scene(cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames.frames, b.frames.frames))
    assert np.array_equal(a.audio.samples, b.audio.samples)
    assert a.ground_truth() == b.ground_truth()
    c = simulate_scene(dataclasses.replace(cfg, rng_seed=124))
    assert not np.array_equal(a.audio.samples, c.audio.samples)


def test_timestamps_exact():
    cfg = SceneConfig(depth_m=20.0, fps=120)
    frames = render_frames(simulate_trajectory(cfg), cfg)
    assert len(frames.frames) == len(frames.timestamps)
    assert np.array_equal(frames.timestamps, np.arange(len(frames)) / 120)


def test_static_object_noiseless_frames_identical():
    cfg = SceneConfig(depth_m=10.0, drop_height_m=0.0, restitution=0.0, horizontal_velocity=0.0,
                      duration_s=0.2, fps=60)
    frames = render_frames(simulate_trajectory(cfg), cfg)
    assert all(np.array_equal(frames.frames[0], f) for f in frames.frames[1:])


def test_rendered_centroid_advances_one_pixel_per_frame():
    # 1 px/frame at 60 fps and 100 px/m is 0.6 m/s; no gravity so the motion is purely horizontal
    cfg = SceneConfig(depth_m=10.0, drop_height_m=0.0, restitution=0.0, horizontal_velocity=0.6,
                      fps=60, duration_s=0.3)
    traj = simulate_trajectory(cfg)
    rng = np.random.default_rng(0)
    flat = np.full((cfg.height, cfg.width), 0.3)
    frames = render_sprites([Sprite(traj, cfg)], cfg, 0.3, flat, rng)
    bg_level = np.rint(0.3 * 255)
    xs = []
    for f in frames.frames:
        # the object's support is wherever the frame differs from the flat background
        ys, xx = np.nonzero(f != bg_level)
        xs.append(0.5 * (xx.min() + xx.max()))
    steps = np.diff(xs)
    assert np.all(np.abs(steps - 1.0) <= 1.0)  # support edges move in whole pixels
    assert (xs[-1] - xs[0]) / (len(xs) - 1) == pytest.approx(1.0, abs=0.1)


def test_rendered_centroid_matches_camera_model():
    cfg = SceneConfig(depth_m=25.0, fps=120, rng_seed=3)
    traj = simulate_trajectory(cfg)
    sprite = Sprite(traj, cfg)
    frames = render_frames(traj, cfg)
    for n in range(0, len(frames), 7):
        t = frames.timestamps[n]
        cu, cv = sprite.image_center(t - cfg.depth_m / cfg.c_light)
        cov, _ = disc_coverage(frames.shape, (cu, cv), sprite.radius_px)
        # coverage-weighted centroid of the rendered support against the oracle centre
        yy, xx = np.mgrid[0:frames.shape[0], 0:frames.shape[1]]
        est = np.array([(cov * xx).sum(), (cov * yy).sum()]) / cov.sum()
        assert np.hypot(est[0] - cu, est[1] - cv) <= 0.2


def test_light_delay_is_far_below_a_frame():
    delay = 50.0 / 2.998e8
    assert delay == pytest.approx(1.6678e-7, rel=1e-4)
    assert delay * 1e4 < 1 / 240


def test_render_error_when_object_never_visible():
    cfg = SceneConfig(depth_m=10.0, duration_s=0.1, start_x_px=-500.0)
    with pytest.raises(RenderError):
        render_frames(simulate_trajectory(cfg), cfg)


def test_onset_sample_worked_example():
    cfg = SceneConfig(depth_m=34.0, v_sound=340.0, t_hw_s=0.0)
    assert onset_sample(0.4518, cfg) == 26486


def test_hardware_offset_moves_onset_earlier():
    base = SceneConfig(depth_m=34.0, drop_height_m=1.0)
    shifted = dataclasses.replace(base, t_hw_s=0.001)
    assert onset_sample(0.4518, base) - onset_sample(0.4518, shifted) == 48


def test_zero_depth_limit():
    cfg = SceneConfig(depth_m=1e-9)
    assert onset_sample(0.4518, cfg) == round(0.4518 * 48000)


@given(depth=st.floats(2.0, 50.0), h=st.floats(0.2, 1.0), t_hw=st.floats(-0.005, 0.005))
def test_clock_consistency(depth, h, t_hw):
    cfg = SceneConfig(depth_m=depth, drop_height_m=h, t_hw_s=t_hw)
    t_c = math.sqrt(2 * h / 9.8)
    k = onset_sample(t_c, cfg)
    clip = AudioClip(np.zeros(1), 48000, t_hw)
    heard = float(clip.sample_to_scene_time(k))
    assert abs(heard - t_c - depth / cfg.v_sound) <= 0.5 / 48000 + 1e-12


def test_audio_onsets_and_amplitude():
    cfg = SceneConfig(depth_m=4.0, restitution=0.0, t_hw_s=0.001)
    traj = simulate_trajectory(cfg)
    clip = synthesize_audio(traj, cfg)
    k = onset_sample(traj.collision_times[0], cfg)
    assert np.all(clip.samples[:k] == 0.0)
    assert clip.samples[k] == pytest.approx(0.25)
    assert np.max(np.abs(clip.samples)) <= 1.0
    assert clip.clock_offset_s == 0.001 and not clip.overlapping


def test_ramped_onset_starts_from_zero():
    cfg = SceneConfig(depth_m=4.0, restitution=0.0, impact_model="ramped_onset")
    traj = simulate_trajectory(cfg)
    clip = synthesize_audio(traj, cfg)
    k = onset_sample(traj.collision_times[0], cfg)
    assert clip.samples[k] == 0.0
    ramp = np.abs(clip.samples[k:k + 144])
    assert ramp.max() < 0.25


def test_close_bounces_flag_overlap():
    # elastic bounce of a 1 cm drop repeats every ~90 ms; a 4 mm drop every ~57 ms
    cfg = SceneConfig(depth_m=5.0, drop_height_m=0.004, restitution=1.0, duration_s=0.4)
    clip = synthesize_audio(simulate_trajectory(cfg), cfg)
    assert clip.overlapping


def test_rerender_keeps_background_and_timing():
    cfg = SceneConfig(depth_m=15.0, fps=240, rng_seed=5)
    scene = simulate_scene(cfg)
    low = rerender(scene, 30)
    assert low.fps == 30
    # frames at common instants are identical when noiseless
    for n in range(len(low)):
        assert np.array_equal(low.frames[n], scene.frames.frames[8 * n])


def test_compose_adds_second_collision():
    base = SceneConfig(depth_m=10.0, restitution=0.0, drop_height_m=0.4, rng_seed=1)
    other = SceneConfig(depth_m=30.0, restitution=0.0, drop_height_m=0.3, rng_seed=2)
    t_patch = base.fall_time + 0.2 - other.fall_time
    scene = compose_scenes(base, other, t_patch, 70.0)
    times = [c.t_scene for c in scene.collisions]
    assert len(times) == 2
    assert times[1] - times[0] == pytest.approx(0.2, abs=1e-9)
    assert [c.depth_m for c in scene.collisions] == [10.0, 30.0]
    for c in scene.collisions:
        k = c.onset_sample
        assert np.all(scene.audio.samples[k - 20:k] == 0.0)
        assert scene.audio.samples[k] != 0.0
    assert not scene.audio.overlapping


def test_background_statistics():
    cfg = SceneConfig(depth_m=10.0)
    bg = make_background(cfg, np.random.default_rng(0))
    assert bg.shape == (cfg.height, cfg.width)
    assert 0.4 < bg.mean() < 0.5
