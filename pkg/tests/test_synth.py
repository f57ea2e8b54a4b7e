"""Trace generator tests: planted-feature oracles, splits, persistence."""

import dataclasses

import numpy as np
import pytest

from grlforge import synth
from grlforge.spectrogram import StftParams, freq_to_row, frame_to_col, stft_spectrogram
from grlforge.synth import (
    OFF,
    ON,
    DatasetSplit,
    ScenarioSpec,
    Trace,
    fragile_atoms_for,
    generate_collection,
    read_manifest,
    read_trace,
    read_traces,
    split_dataset,
    tone_energy,
    write_manifest,
    write_trace,
    write_traces,
)

from oracles import naive_dft  # noqa: F401  (fft checked via grlforge.spectrogram)
from grlforge.spectrogram import fft


def two_tone_spec(**kw) -> ScenarioSpec:
    defaults = dict(
        n_domains=2,
        background_tones=(((12_000.0, 0.3),), ((18_000.0, 0.3),)),
        seed=42,
    )
    defaults.update(kw)
    return ScenarioSpec(**defaults)


# --- spec validation ---------------------------------------------------------

def test_spec_rejects_bad_fields():
    with pytest.raises(ValueError, match="Nyquist"):
        ScenarioSpec(device_tone_hz=150_000.0)
    with pytest.raises(ValueError, match="n_domains"):
        ScenarioSpec(n_domains=1)
    with pytest.raises(ValueError, match="amplitudes"):
        ScenarioSpec(device_tone_amplitude=-0.1)
    with pytest.raises(ValueError, match="class_balance"):
        ScenarioSpec(class_balance=0.0)
    with pytest.raises(ValueError, match="per domain"):
        ScenarioSpec(n_domains=3, background_tones=(((1000.0, 0.1),),))
    with pytest.raises(ValueError, match="per domain"):
        ScenarioSpec(n_domains=3, interferer_tones=(40_000.0,))


def test_invalid_domain_and_class_rejected():
    spec = two_tone_spec()
    with pytest.raises(ValueError, match="domain"):
        generate_collection(spec, 5, ON, 1)
    with pytest.raises(ValueError, match="class_label"):
        generate_collection(spec, 0, 7, 1)


# --- generation oracles ------------------------------------------------------

def test_no_sources_gives_all_zero_channels():
    spec = ScenarioSpec(n_domains=2, noise_sigma=0.0, fragile_gain=0.0)
    trace = generate_collection(spec, 0, OFF, 1)[0]
    assert np.all(trace.channels == 0.0)
    assert trace.channels.shape == (3, spec.n_samples)


def test_device_tone_peaks_at_expected_fft_bin():
    spec = ScenarioSpec(n_domains=2, device_tone_hz=50_000.0)
    trace = generate_collection(spec, 1, ON, 1)[0]
    n = 16_384
    mag = np.abs(fft(trace.channels[0][:n]))[: n // 2]
    expected_bin = round(spec.device_tone_hz * n / spec.sample_rate)
    assert int(np.argmax(mag)) == expected_bin


def test_channel_length_invariant():
    spec = two_tone_spec(noise_sigma=0.05, fragile_gain=0.01)
    for trace in generate_collection(spec, 0, ON, 3):
        assert trace.channels.shape == (3, int(spec.sample_rate * spec.trace_duration))


def test_determinism_bit_identical():
    spec = two_tone_spec(noise_sigma=0.05, fragile_gain=0.01)
    a = generate_collection(spec, 1, ON, 3)
    b = generate_collection(spec, 1, ON, 3)
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.channels, tb.channels)
    # noise differs across trace indices
    assert not np.array_equal(a[0].channels, a[1].channels)


def test_separability_oracle_device_tone():
    """noise 0, fragile 0: bandpass energy at the device tone separates on/off 100%."""
    spec = two_tone_spec(noise_sigma=0.0, fragile_gain=0.0)
    on = [tone_energy(t.channels, spec.sample_rate, spec.device_tone_hz)
          for d in range(2) for t in generate_collection(spec, d, ON, 4)]
    off = [tone_energy(t.channels, spec.sample_rate, spec.device_tone_hz)
           for d in range(2) for t in generate_collection(spec, d, OFF, 4)]
    assert min(on) > max(off)


def test_domain_signature_oracle():
    """Bandpass energy at a domain's background tone identifies the domain 100%."""
    spec = two_tone_spec(noise_sigma=0.0, background_class_shift=0.1)
    freqs = [spec.background_tones[d][0][0] for d in range(2)]
    for d in range(2):
        for cls in (ON, OFF):
            for t in generate_collection(spec, d, cls, 3):
                own = tone_energy(t.channels, spec.sample_rate, freqs[d])
                other = tone_energy(t.channels, spec.sample_rate, freqs[1 - d])
                assert own > other


def test_background_class_shift_direction():
    spec = two_tone_spec(background_class_shift=0.2)
    hz = spec.background_tones[0][0][0]
    on = generate_collection(spec, 0, ON, 1)[0]
    off = generate_collection(spec, 0, OFF, 1)[0]
    assert tone_energy(on.channels, spec.sample_rate, hz) > tone_energy(
        off.channels, spec.sample_rate, hz
    )


def test_interferer_present_for_both_classes():
    spec = two_tone_spec(
        interferer_tones=(49_600.0, 50_400.0), interferer_amplitude=0.2
    )
    for cls in (ON, OFF):
        t = generate_collection(spec, 0, cls, 1)[0]
        assert tone_energy(t.channels, spec.sample_rate, 49_600.0) > 0.05
        assert t.provenance["interferer"] == (49_600.0, 0.2)


def test_provenance_records_active_sources():
    spec = two_tone_spec(fragile_gain=0.01, background_class_shift=0.1)
    on = generate_collection(spec, 0, ON, 1)[0]
    off = generate_collection(spec, 0, OFF, 1)[0]
    assert on.provenance["device_tone"] and not off.provenance["device_tone"]
    assert len(on.provenance["fragile"]) == spec.fragile_atoms
    assert on.provenance["background"][0][1] > off.provenance["background"][0][1]


# --- fragile atoms -----------------------------------------------------------

def test_atoms_deterministic_and_keyed():
    spec = two_tone_spec()
    a = fragile_atoms_for(spec, 0, ON)
    assert a == fragile_atoms_for(spec, 0, ON)
    assert a != fragile_atoms_for(spec, 0, OFF)
    assert a != fragile_atoms_for(spec, 1, ON)
    assert a != fragile_atoms_for(dataclasses.replace(spec, seed=43), 0, ON)


def test_atoms_avoid_planted_tone_bins():
    spec = two_tone_spec(interferer_tones=(49_600.0, 50_400.0),
                         interferer_amplitude=0.1)
    w = spec.fragile_window_len
    per_bin = spec.sample_rate / w
    device_bin = round(spec.device_tone_hz / per_bin)
    for d in range(2):
        hot = {device_bin, round(spec.interferer_tones[d] / per_bin)}
        hot |= {round(hz / per_bin) for hz, _ in spec.background_tones[d]}
        for atom in fragile_atoms_for(spec, d, ON):
            assert 16 <= atom.freq_bin < int(0.75 * (w // 2))
            assert all(abs(atom.freq_bin - h) > 3 for h in hot)
            assert 0 <= atom.channel < 3


def test_atoms_visible_in_spectrogram_cells():
    spec = two_tone_spec(fragile_gain=0.02)
    params = StftParams(scale=6.0)
    n_frames = (spec.n_samples - params.window_len) // params.hop + 1
    with_atoms = generate_collection(spec, 0, OFF, 1)[0]
    without = generate_collection(dataclasses.replace(spec, fragile_gain=0.0), 0, OFF, 1)[0]
    s1 = stft_spectrogram(with_atoms.channels, spec.sample_rate, params).values
    s0 = stft_spectrogram(without.channels, spec.sample_rate, params).values
    for atom in fragile_atoms_for(spec, 0, OFF):
        row = freq_to_row(atom.freq_bin * spec.sample_rate / params.window_len,
                          spec.sample_rate, params)
        col = frame_to_col(atom.frame, n_frames, params)
        assert s1[atom.channel, row, col] > s0[atom.channel, row, col]


# --- splits ------------------------------------------------------------------

def fake_traces(n, domain):
    return [Trace(np.zeros((3, 4)), ON, domain, 8.0) for _ in range(n)]


def test_split_matches_worked_example():
    cols = [fake_traces(100, 0), fake_traces(100, 1)]
    split = split_dataset(cols, 0.8, 0.05, held_out_test_collections=[1])
    assert len(split.train) == 80
    assert len(split.validation) == 15
    assert split.train == cols[0][:80]
    assert split.validation == cols[0][85:]
    assert split.test == cols[1]


def test_split_ninety_ten_variant():
    cols = [fake_traces(100, 0), fake_traces(10, 1)]
    split = split_dataset(cols, 0.9, 0.0, held_out_test_collections=[1])
    assert len(split.train) == 90
    assert len(split.validation) == 10


def test_split_train_validation_disjoint():
    cols = [fake_traces(40, 0), fake_traces(40, 1), fake_traces(40, 2)]
    split = split_dataset(cols, 0.8, 0.05, held_out_test_collections=[2])
    train_ids = {id(t) for t in split.train}
    assert not train_ids & {id(t) for t in split.validation}
    assert all(t.domain_label == 2 for t in split.test)


def test_split_errors():
    cols = [fake_traces(20, 0), fake_traces(20, 1)]
    with pytest.raises(ValueError, match="held out"):
        split_dataset(cols, 0.8, 0.05, held_out_test_collections=[])
    with pytest.raises(ValueError, match="outside"):
        split_dataset(cols, 0.8, 0.05, held_out_test_collections=[2])
    with pytest.raises(ValueError, match="every collection"):
        split_dataset(cols, 0.8, 0.05, held_out_test_collections=[0, 1])
    with pytest.raises(ValueError, match="no validation"):
        split_dataset(cols, 0.8, 0.2, held_out_test_collections=[1])


# --- persistence -------------------------------------------------------------

def test_trace_roundtrip(tmp_path):
    spec = two_tone_spec(noise_sigma=0.05, fragile_gain=0.01)
    trace = generate_collection(spec, 1, ON, 1)[0]
    path = tmp_path / "one.bin"
    write_trace(path, trace)
    back = read_trace(path, spec.sample_rate)
    assert np.array_equal(back.channels, trace.channels)
    assert back.class_label == ON and back.domain_label == 1
    assert back.sample_rate == spec.sample_rate


def test_trace_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTATRCE" + b"\x00" * 40)
    with pytest.raises(ValueError, match="magic"):
        read_trace(path, 8.0)


def test_manifest_roundtrip(tmp_path):
    spec = two_tone_spec(
        noise_sigma=0.07,
        fragile_gain=0.0123,
        background_class_shift=0.15,
        interferer_tones=(49_600.0, 50_400.0),
        interferer_amplitude=0.2,
    )
    path = tmp_path / "manifest.txt"
    write_manifest(path, spec)
    assert read_manifest(path) == spec


def test_directory_roundtrip(tmp_path):
    spec = two_tone_spec(noise_sigma=0.02)
    traces = generate_collection(spec, 0, ON, 2) + generate_collection(spec, 0, OFF, 1)
    write_traces(tmp_path / "ds", traces, spec)
    back, back_spec = read_traces(tmp_path / "ds")
    assert back_spec == spec
    assert len(back) == 3
    for a, b in zip(back, traces):
        assert np.array_equal(a.channels, b.channels)
        assert a.class_label == b.class_label
