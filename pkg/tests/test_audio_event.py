import numpy as np
import pytest
from hypothesis import given, strategies as st

from flashbang.audio_event import (CLIP_LENGTH, AudioOnset, OnsetParams, build_highlighted_clip,
                                   energy_envelope, locate_onset, onset_report, video_time_to_sample,
                                   write_onset_report)
from flashbang.errors import InputError, NoOnsetError
from flashbang.io import read_json
from flashbang.scene_sim import AudioClip, ImpactModel, impact_waveform

FS = 48000
RAMP_SAMPLES = 144  # 3 ms at 48 kHz


def clip_with_impact(onset, model="sharp_impulse", amp=0.5, snr_db=0.0, n=FS, seed=0, t_hw=0.0):
    rng = np.random.default_rng(seed)
    x = np.zeros(n)
    wave = amp * impact_waveform(ImpactModel(model), FS, rng)
    hi = min(onset + len(wave), n)
    x[onset:hi] = wave[:hi - onset]
    if snr_db > 0:
        x += amp * 10 ** (-snr_db / 20) * rng.standard_normal(n)
    return AudioClip(x, FS, t_hw)


def test_video_time_mapping():
    assert video_time_to_sample(0.4518, FS, 0.0) == pytest.approx(21686.4)
    assert video_time_to_sample(0.4518, FS, 0.001) == pytest.approx(21686.4 - 48)


def test_highlight_centre_example():
    clip = build_highlighted_clip(clip_with_impact(26486), 0.4518)
    assert len(clip.samples) == CLIP_LENGTH
    assert clip.highlight.sum() == 24
    assert abs(clip.highlight_center - 21686) <= 0.5
    # the highlight sits a quarter of the way into the clip
    first = int(np.flatnonzero(clip.highlight)[0])
    assert abs(first + 12 - CLIP_LENGTH / 4) <= 1
    assert not clip.clipped


def test_highlight_shift_with_clock_offset():
    a = build_highlighted_clip(clip_with_impact(26486), 0.4518)
    b = build_highlighted_clip(clip_with_impact(26486, t_hw=0.001), 0.4518)
    assert a.highlight_center - b.highlight_center == 48


def test_clip_at_recording_start_is_flagged():
    audio = clip_with_impact(26486)
    clip = build_highlighted_clip(audio, 0.0)
    assert clip.clipped
    assert clip.base_sample_index < 0
    assert np.all(clip.samples[:-clip.base_sample_index] == 0.0)
    end = build_highlighted_clip(audio, 0.999)
    assert end.clipped
    with pytest.raises(ValueError):
        build_highlighted_clip(audio, 0.1, length=10, highlight=24)


def test_clip_copies_the_recording():
    audio = clip_with_impact(26486)
    clip = build_highlighted_clip(audio, 0.4518)
    base = clip.base_sample_index
    assert np.array_equal(clip.samples, audio.samples[base:base + CLIP_LENGTH])


def test_envelope_is_causal_and_exact_zero():
    x = np.zeros(100)
    x[40] = 1.0
    env = energy_envelope(x, 4)
    assert np.all(env[:40] == 0.0)
    assert np.allclose(env[40:44], 0.25) and np.all(env[44:] == 0.0)


def test_sharp_impulse_noiseless_exact():
    onset = locate_onset(clip_with_impact(26486), 21686 - 240)
    assert onset.onset_sample == 26486
    assert onset.t_audio == 26486 / FS
    assert onset.peak_sample >= onset.onset_sample


@pytest.mark.parametrize("seed", range(5))
def test_ramped_onset_within_ramp(seed):
    onset = locate_onset(clip_with_impact(26486, "ramped_onset", seed=seed), 21000)
    assert 26486 <= onset.onset_sample <= 26486 + RAMP_SAMPLES


def test_silence_has_no_onset():
    with pytest.raises(NoOnsetError):
        locate_onset(AudioClip(np.zeros(FS), FS), 1000)


@pytest.mark.parametrize("seed", range(20))
def test_noise_only_has_no_onset(seed):
    rng = np.random.default_rng(seed)
    with pytest.raises(NoOnsetError):
        locate_onset(AudioClip(0.01 * rng.standard_normal(FS), FS), 1000)


def test_empty_region_is_input_error():
    with pytest.raises(InputError):
        locate_onset(clip_with_impact(100, n=1000), 5000)


@given(k=st.integers(3000, 40000), lead=st.integers(1, 2500), seed=st.integers(0, 1000))
def test_shift_invariance(k, lead, seed):
    onset = locate_onset(clip_with_impact(k, seed=seed), k - lead)
    assert onset.onset_sample == k


@given(amp=st.floats(1e-3, 1.0), seed=st.integers(0, 1000))
def test_amplitude_invariance(amp, seed):
    ref = locate_onset(clip_with_impact(20000, "ramped_onset", seed=seed), 18000)
    scaled = locate_onset(clip_with_impact(20000, "ramped_onset", amp=amp, seed=seed), 18000)
    assert scaled.onset_sample == ref.onset_sample


def test_error_grows_as_snr_drops():
    mean_err = []
    for snr in (40.0, 30.0, 20.0):
        errs = [locate_onset(clip_with_impact(26486, "ramped_onset", snr_db=snr, seed=s), 24000).onset_sample - 26486
                for s in range(10)]
        mean_err.append(np.mean(np.abs(errs)))
    assert mean_err == sorted(mean_err)
    assert mean_err[-1] <= 0.003 * FS


def test_sharp_impulse_exact_at_moderate_snr():
    for seed in range(5):
        onset = locate_onset(clip_with_impact(26486, snr_db=30.0, seed=seed), 24000)
        assert onset.onset_sample == 26486


def test_default_search_stop_covers_max_depth():
    p = OnsetParams()
    assert p.max_delay_s == pytest.approx(60 / 343)
    far = 21686 + int(0.17 * FS)
    assert locate_onset(clip_with_impact(far), 21686).onset_sample == far
    with pytest.raises(ValueError):
        OnsetParams(alpha=1.5)


def test_report_round_trip(tmp_path):
    audio = clip_with_impact(26486)
    onset = locate_onset(audio, 21000)
    clip = build_highlighted_clip(audio, 0.4518, center_sample=onset.onset_sample)
    write_onset_report(tmp_path / "onset.json", onset, clip)
    data = read_json(tmp_path / "onset.json")
    assert data["onset_sample"] == 26486
    assert data["clip_base_sample"] == clip.base_sample_index
    assert data == onset_report(onset, clip)
    assert isinstance(onset, AudioOnset)
