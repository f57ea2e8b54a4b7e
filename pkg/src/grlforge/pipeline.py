"""Scenario preparation and dataset assembly.

Preparing a scenario is a two-phase affair: first the spectrogram
normalization scale is fitted on calibration traces with the fragile pattern
disabled, then the raw fragile gain is calibrated so the planted atoms reach
spec.fragile_amplitude in *normalized* units under that frozen scale. Both
steps are deterministic in the scenario seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import synth
from .datasets import SpectraSet
from .spectrogram import (
    StftParams,
    fit_scale,
    frame_to_col,
    freq_to_row,
    stft_spectrogram,
)


@dataclass(frozen=True)
class CellRef:
    """One spectrogram cell: plane index plus output row/column."""

    channel: int
    row: int
    col: int


def n_stft_frames(spec: synth.ScenarioSpec, params: StftParams) -> int:
    return (spec.n_samples - params.window_len) // params.hop + 1


def atom_cells(spec: synth.ScenarioSpec, domain: int, class_label: int,
               params: StftParams):
    """Output-image cells hit by the (domain, class) fragile atoms."""
    frames = n_stft_frames(spec, params)
    cells = []
    for atom in synth.fragile_atoms_for(spec, domain, class_label):
        hz = atom.freq_bin * spec.sample_rate / params.window_len
        cells.append(CellRef(
            atom.channel,
            freq_to_row(hz, spec.sample_rate, params),
            frame_to_col(atom.frame, frames, params),
        ))
    return tuple(cells)


def fit_normalization(spec: synth.ScenarioSpec, params: StftParams,
                      per_cell: int = 2) -> StftParams:
    """Freeze the global scale from a calibration batch (fragile pattern off)."""
    calib_spec = replace(spec, fragile_gain=0.0)
    batches = []
    for d in range(spec.n_domains):
        for cls in (synth.ON, synth.OFF):
            for t in synth.generate_collection(calib_spec, d, cls, per_cell):
                batches.append(t.channels)
    return replace(params, scale=fit_scale(batches, spec.sample_rate, params))


def atom_heights(spec: synth.ScenarioSpec, params: StftParams, domain: int,
                 class_label: int):
    """Per-atom normalized height above the clean background: (cells, heights)."""
    clean = replace(spec, noise_sigma=0.0)
    with_atoms = synth.generate_collection(clean, domain, class_label, 1)[0]
    without = synth.generate_collection(
        replace(clean, fragile_gain=0.0), domain, class_label, 1
    )[0]
    s1 = stft_spectrogram(with_atoms.channels, spec.sample_rate, params).values
    s0 = stft_spectrogram(without.channels, spec.sample_rate, params).values
    cells = atom_cells(spec, domain, class_label, params)
    heights = np.array([s1[c.channel, c.row, c.col] - s0[c.channel, c.row, c.col]
                        for c in cells])
    return cells, heights


def _mean_atom_height(spec: synth.ScenarioSpec, params: StftParams) -> float:
    heights = []
    for d in range(spec.n_domains):
        for cls in (synth.ON, synth.OFF):
            heights.append(atom_heights(spec, params, d, cls)[1])
    return float(np.mean(np.concatenate(heights)))


def calibrate_fragile_gain(spec: synth.ScenarioSpec, params: StftParams,
                           rtol: float = 0.05, max_iter: int = 8) -> float:
    """Raw burst gain that puts the mean atom height at spec.fragile_amplitude."""
    if params.scale is None:
        raise ValueError("fit the normalization scale before calibrating")
    target = spec.fragile_amplitude
    if target == 0.0:
        return 0.0
    gain = 0.01
    for _ in range(max_iter):
        height = _mean_atom_height(replace(spec, fragile_gain=gain), params)
        if height <= 0:
            gain *= 4.0
            continue
        if abs(height - target) <= rtol * target:
            return gain
        # magnitude is linear in gain; log1p is near-linear at these heights
        gain *= target / height
    raise RuntimeError(
        f"fragile gain calibration did not converge (last gain {gain})"
    )


def prepare_scenario(spec: synth.ScenarioSpec, params: StftParams,
                     per_cell: int = 2):
    """Fitted (spec, params) pair ready for dataset generation."""
    fitted = fit_normalization(spec, params, per_cell=per_cell)
    gain = calibrate_fragile_gain(spec, fitted) if spec.fragile_amplitude > 0 else 0.0
    return replace(spec, fragile_gain=gain), fitted


def class_timeline(n: int, balance: float):
    """Deterministic interleaving: position i is ON iff the running ON quota steps."""
    return [
        synth.ON if math.ceil(balance * (i + 1)) > math.ceil(balance * i) else synth.OFF
        for i in range(n)
    ]


def domain_timeline(spec: synth.ScenarioSpec, domain: int, n: int):
    """n traces of one collection in session order with interleaved classes."""
    labels = class_timeline(n, spec.class_balance)
    ons = synth.generate_collection(spec, domain, synth.ON, labels.count(synth.ON))
    offs = synth.generate_collection(spec, domain, synth.OFF, labels.count(synth.OFF))
    ons_iter, offs_iter = iter(ons), iter(offs)
    return [next(ons_iter) if c == synth.ON else next(offs_iter) for c in labels]


def spectra_from_traces(traces, params: StftParams) -> SpectraSet:
    X = np.stack([
        stft_spectrogram(t.channels, t.sample_rate, params).values for t in traces
    ])
    y = np.array([t.class_label for t in traces])
    dom = np.array([t.domain_label for t in traces])
    return SpectraSet(X, y, dom)


@dataclass
class SpectraSplit:
    train: SpectraSet
    validation: SpectraSet
    test: SpectraSet


def build_dataset(spec: synth.ScenarioSpec, params: StftParams,
                  n_per_domain: int, train_fraction: float = 0.8,
                  buffer_fraction: float = 0.05,
                  held_out=()) -> SpectraSplit:
    """Generate every collection, transform, and split chronologically.

    Raw traces are dropped domain by domain to keep the footprint at one
    collection of waveforms plus the final spectrogram arrays.
    """
    per_domain = []
    refs = []
    for d in range(spec.n_domains):
        traces = domain_timeline(spec, d, n_per_domain)
        per_domain.append(spectra_from_traces(traces, params))
        refs.append([(d, i) for i in range(len(traces))])
    split = synth.split_dataset(refs, train_fraction, buffer_fraction, held_out)

    def gather(ref_list):
        X = np.stack([per_domain[d].X[i] for d, i in ref_list])
        y = np.array([per_domain[d].y[i] for d, i in ref_list])
        dom = np.array([per_domain[d].domain[i] for d, i in ref_list])
        return SpectraSet(X, y, dom)

    return SpectraSplit(gather(split.train), gather(split.validation),
                        gather(split.test))
