"""Named scenario presets used by the CLI and the acceptance suite.

Tones are planted at output-row centers so every domain marker occupies its
own spectrogram row. Markers couple into pickup channel 2 only, while the
device tone reaches all three channels: domain evidence lives in one input
plane, so a reversed domain head can scrub it by muting that plane without
touching the device line carried by the other two. The interferer of the
"hard" preset sits in the same output row as the device tone (adjacent raw
FFT bins), which is what makes that scenario hard: row energy alone no
longer separates the classes.

The "fragile" and "hard" presets keep the device tone deliberately faint
next to the per-condition fragile atoms: a network that overfits the atoms
saturates training accuracy without ever finding the line that transfers to
an unseen collection, and a little input noise flips that preference. The
noise floor stays low (0.1) because a loud floor washes the atoms out of the
magnitudes entirely and leaves nothing for the robustness story to remove.

`preset_train_config` carries the training settings those calibrations
assume; the bare TrainConfig defaults are tuned for the small fast fixtures
used across the test suite, not for full preset scenarios.
"""

import dataclasses

from .spectrogram import StftParams, row_center_hz
from .synth import ScenarioSpec
from .training import TrainConfig

PRESETS = ("clean", "fragile", "hard")

_MARKER_BASE_ROW = 6
_MARKER_ROW_STEP = 4
_MARKER_AMP = 0.18
_MARKER_CHANNEL = 2


def _marker_tones(n_domains: int, sample_rate: float, params: StftParams):
    """One always-on marker tone per domain, each in a private output row."""
    tones = []
    for d in range(n_domains):
        row = _MARKER_BASE_ROW + _MARKER_ROW_STEP * d
        hz = row_center_hz(row, sample_rate, params)
        tones.append(((hz, _MARKER_AMP),))
    return tuple(tones)


def _interferer_tones(n_domains: int, sample_rate: float, window_len: int):
    """Always-on tones in the raw bins right next to the device-tone bin."""
    per_bin = sample_rate / window_len
    return tuple((129 + d % 2) * per_bin for d in range(n_domains))


def scenario_preset(name: str, n_domains: int = 7, seed: int = 0,
                    params: StftParams | None = None) -> ScenarioSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    params = params or StftParams()
    base = dict(
        n_domains=n_domains,
        seed=seed,
        background_tones=_marker_tones(n_domains, 200_000.0, params),
        background_channel=_MARKER_CHANNEL,
    )
    if name == "clean":
        return ScenarioSpec(
            device_tone_amplitude=0.25,
            noise_sigma=0.1,
            fragile_amplitude=0.0,
            **base,
        )
    if name == "fragile":
        return ScenarioSpec(
            device_tone_amplitude=0.01,
            noise_sigma=0.1,
            fragile_amplitude=0.03,
            fragile_atoms=40,
            **base,
        )
    return ScenarioSpec(  # hard
        device_tone_amplitude=0.02,
        noise_sigma=0.1,
        fragile_amplitude=0.03,
        fragile_atoms=40,
        background_class_shift=0.3,
        interferer_tones=_interferer_tones(n_domains, 200_000.0, params.window_len),
        interferer_amplitude=0.12,
        **base,
    )


def preset_train_config(name: str, mode: str = "OTF", **overrides) -> TrainConfig:
    """Training settings the scenario presets were calibrated against.

    The faint device tones need a gentler step (3e-3) and a longer run than
    the TrainConfig defaults; snapshots are trimmed to the best epoch so a
    full sweep stays inside the sandbox memory budget.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    settings = dict(
        mode=mode,
        learning_rate=3e-3,
        batch_size=16,
        epochs=100,
        keep="best",
    )
    settings.update(overrides)
    return TrainConfig(**settings)
