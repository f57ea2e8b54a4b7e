"""Scenario preparation tests: calibration, dataset assembly, fragile-feature MC."""

from dataclasses import replace

import numpy as np
import pytest

from grlforge import synth
from grlforge.perturb import perturb
from grlforge.pipeline import (
    atom_cells,
    atom_heights,
    build_dataset,
    calibrate_fragile_gain,
    class_timeline,
    domain_timeline,
    fit_normalization,
    n_stft_frames,
    prepare_scenario,
    spectra_from_traces,
)
from grlforge.spectrogram import StftParams, stft_spectrogram
from grlforge.synth import OFF, ON, ScenarioSpec


def small_spec(**kw) -> ScenarioSpec:
    defaults = dict(
        n_domains=2,
        background_tones=(((12_000.0, 0.3),), ((18_000.0, 0.3),)),
        background_class_shift=0.1,
        noise_sigma=0.02,
        seed=101,
    )
    defaults.update(kw)
    return ScenarioSpec(**defaults)


def test_class_timeline_balance():
    assert class_timeline(6, 0.5) == [ON, OFF, ON, OFF, ON, OFF]
    quarter = class_timeline(8, 0.25)
    assert quarter.count(ON) == 2
    assert class_timeline(7, 0.5).count(ON) == 4  # ceil


def test_domain_timeline_deterministic():
    spec = small_spec()
    a = domain_timeline(spec, 0, 6)
    b = domain_timeline(spec, 0, 6)
    assert [t.class_label for t in a] == [ON, OFF, ON, OFF, ON, OFF]
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.channels, tb.channels)


def test_fit_normalization_positive_and_deterministic():
    spec = small_spec()
    p1 = fit_normalization(spec, StftParams())
    p2 = fit_normalization(spec, StftParams())
    assert p1.scale == p2.scale
    assert p1.scale > 0


def test_calibration_reaches_target_height():
    spec = small_spec()
    params = fit_normalization(spec, StftParams())
    gain = calibrate_fragile_gain(spec, params, rtol=0.05)
    heights = []
    for d in range(spec.n_domains):
        for cls in (ON, OFF):
            heights.append(
                atom_heights(replace(spec, fragile_gain=gain), params, d, cls)[1]
            )
    mean = float(np.mean(np.concatenate(heights)))
    assert mean == pytest.approx(spec.fragile_amplitude, rel=0.1)


def test_calibration_requires_fitted_scale():
    with pytest.raises(ValueError, match="scale"):
        calibrate_fragile_gain(small_spec(), StftParams())


def test_prepare_scenario_deterministic():
    spec = small_spec()
    s1, p1 = prepare_scenario(spec, StftParams())
    s2, p2 = prepare_scenario(spec, StftParams())
    assert s1 == s2
    assert p1.scale == p2.scale
    assert s1.fragile_gain > 0


def test_atom_cells_in_bounds():
    spec = small_spec(fragile_gain=0.001)
    params = StftParams(scale=5.0)
    cells = atom_cells(spec, 0, ON, params)
    assert len(cells) == spec.fragile_atoms
    for c in cells:
        assert 0 <= c.channel < 3
        assert 0 <= c.row < params.out_freq_bins
        assert 0 <= c.col < params.out_time_bins
    assert n_stft_frames(spec, params) == 77


def test_build_dataset_shapes_and_split():
    spec = small_spec(n_domains=3,
                      background_tones=(((12_000.0, 0.3),), ((18_000.0, 0.3),),
                                        ((24_000.0, 0.3),)))
    params = fit_normalization(spec, StftParams(out_freq_bins=16, out_time_bins=16))
    split = build_dataset(spec, params, n_per_domain=10, held_out=[2])
    assert split.train.X.shape == (16, 3, 16, 16)  # int(0.8*10)=8 per live domain
    assert split.validation.X.shape == (4, 3, 16, 16)
    assert split.test.X.shape == (10, 3, 16, 16)
    assert set(split.train.domain) == {0, 1}
    assert set(split.test.domain) == {2}
    assert set(split.train.y) == {ON, OFF}
    assert split.train.X.min() >= 0.0 and split.train.X.max() <= 1.0


def test_spectra_from_traces_labels():
    spec = small_spec()
    params = fit_normalization(spec, StftParams(out_freq_bins=8, out_time_bins=8))
    traces = domain_timeline(spec, 1, 4)
    ds = spectra_from_traces(traces, params)
    assert np.array_equal(ds.y, [ON, OFF, ON, OFF])
    assert set(ds.domain) == {1}


def test_fragile_feature_mc_invariant():
    """The planted pattern separates classes perfectly when clean, but its
    correlation with the label collapses under uniform noise of twice its
    amplitude (post-normalization)."""
    base = ScenarioSpec(
        n_domains=2,
        device_tone_amplitude=0.0,  # isolate the fragile mechanism
        noise_sigma=0.0,
        fragile_amplitude=0.03,
        seed=314,
    )
    params = fit_normalization(base, StftParams())
    gain = calibrate_fragile_gain(base, params)
    spec = replace(base, fragile_gain=gain)

    def clean_image(cls):
        t = synth.generate_collection(spec, 0, cls, 1)[0]
        return stft_spectrogram(t.channels, spec.sample_rate, params).values

    clean = {ON: clean_image(ON), OFF: clean_image(OFF)}
    template = {}
    for cls in (ON, OFF):
        cells, heights = atom_heights(spec, params, 0, cls)
        assert np.all(heights > 0.005)  # every atom individually visible
        template[cls] = [(c, 0.75 * h) for c, h in zip(cells, heights)]

    def score(image):
        def fires(cls):
            return all(image[c.channel, c.row, c.col] > theta
                       for c, theta in template[cls])

        return float(fires(ON)) - float(fires(OFF))

    assert score(clean[ON]) == 1.0
    assert score(clean[OFF]) == -1.0

    n_each = 600
    rng = np.random.default_rng(2718)
    eps = 2 * spec.fragile_amplitude
    scores, labels = [], []
    for cls in (ON, OFF):
        batch = np.repeat(clean[cls][None], n_each, axis=0)
        noisy = perturb(batch, eps, rng)
        scores.extend(score(img) for img in noisy)
        labels.extend([1.0 if cls == ON else -1.0] * n_each)
    scores = np.array(scores)
    labels = np.array(labels)
    if scores.std() == 0:
        corr = 0.0
    else:
        corr = float(np.corrcoef(scores, labels)[0, 1])
    assert abs(corr) < 0.1
