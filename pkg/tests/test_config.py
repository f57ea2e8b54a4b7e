"""Experiment configuration serialization tests.

The contract under test: parse(format(cfg)) == cfg, format is byte-stable,
the single seed reaches every stage, presets expand before explicit keys, and
unknown or malformed keys are refused by name.
"""

import dataclasses
import sys
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from grlforge.config import (
    ENV_SEED,
    ExperimentConfig,
    format_config,
    parse_config,
    read_config,
    write_config,
)
from grlforge.presets import scenario_preset


def test_roundtrip_default():
    cfg = ExperimentConfig()
    assert parse_config(format_config(cfg)) == cfg


def test_format_is_byte_stable():
    cfg = ExperimentConfig(seed=11, output_dir="runs/x")
    text = format_config(cfg)
    assert format_config(parse_config(text)) == text
    assert text.endswith("\n")
    assert "\r" not in text


def test_seed_reaches_scenario_and_train():
    cfg = ExperimentConfig(seed=42)
    assert cfg.scenario.seed == 42
    assert cfg.train.seed == 42


def test_seed_normalization_overrides_part_seeds():
    # parts constructed with their own seeds are pulled onto the config seed
    scen = dataclasses.replace(ExperimentConfig().scenario, seed=7)
    cfg = ExperimentConfig(scenario=scen, seed=3)
    assert cfg.scenario.seed == 3


def test_parse_comments_and_blanks():
    cfg = parse_config("# hello\n\nseed = 9\n  # indented comment\n")
    assert cfg.seed == 9


def test_parse_unknown_key_refused():
    with pytest.raises(ValueError, match="unknown configuration key"):
        parse_config("scenario.bogus = 1\n")
    with pytest.raises(ValueError, match="unknown configuration key"):
        parse_config("nonsense = 1\n")


def test_parse_duplicate_key_refused():
    with pytest.raises(ValueError, match="duplicate key"):
        parse_config("seed = 1\nseed = 2\n")


def test_parse_missing_equals_refused():
    with pytest.raises(ValueError, match="expected 'key = value'"):
        parse_config("just some words\n")


def test_none_literals():
    cfg = parse_config("stft.scale = none\ntrain.tci_fraction = none\n")
    assert cfg.stft.scale is None
    assert cfg.train.tci_fraction is None
    cfg2 = parse_config("stft.scale = 2.5\ntrain.tci_fraction = 0.25\n")
    assert cfg2.stft.scale == 2.5
    assert cfg2.train.tci_fraction == 0.25


def test_grid_and_held_out_parsing():
    cfg = parse_config(
        "sweep.epsilon_grid = 0.0,0.1,0.2\ndata.held_out = 4,2\n"
    )
    assert cfg.epsilon_grid == (0.0, 0.1, 0.2)
    assert cfg.held_out == (2, 4)  # normalized ascending


def test_preset_expansion_then_overrides():
    src = (
        "preset = fragile\n"
        "seed = 5\n"
        "scenario.n_domains = 7\n"
        "scenario.noise_sigma = 0.2\n"
    )
    cfg = parse_config(src)
    ref = scenario_preset("fragile", n_domains=7, seed=5)
    assert cfg.scenario.device_tone_amplitude == ref.device_tone_amplitude
    assert cfg.scenario.background_tones == ref.background_tones
    assert cfg.scenario.noise_sigma == 0.2  # explicit key wins over the preset


def test_resolved_config_has_no_preset_key():
    cfg = parse_config("preset = clean\n")
    text = format_config(cfg)
    assert "preset" not in text
    assert parse_config(text) == cfg


def test_unknown_preset_refused():
    with pytest.raises(ValueError, match="unknown preset"):
        parse_config("preset = mystery\n")


def test_validation_errors():
    with pytest.raises(ValueError, match="n_per_domain"):
        ExperimentConfig(n_per_domain=1)
    with pytest.raises(ValueError, match="train_fraction"):
        ExperimentConfig(train_fraction=1.0)
    with pytest.raises(ValueError, match="replicates"):
        ExperimentConfig(replicates=0)
    with pytest.raises(ValueError, match="kernel_width"):
        ExperimentConfig(kernel_width=0.0)
    with pytest.raises(ValueError, match="output_dir"):
        ExperimentConfig(output_dir="")


def test_scenario_validation_surfaces_at_parse():
    with pytest.raises(ValueError, match="n_domains"):
        parse_config("scenario.n_domains = 1\n")


def test_read_config_env_override(tmp_path):
    path = tmp_path / "exp.txt"
    write_config(path, ExperimentConfig(seed=1))
    cfg = read_config(path, env={ENV_SEED: "77"})
    assert cfg.seed == 77
    assert cfg.scenario.seed == 77 and cfg.train.seed == 77
    assert read_config(path, env={}).seed == 1


def test_read_config_env_override_must_be_int(tmp_path):
    path = tmp_path / "exp.txt"
    write_config(path, ExperimentConfig())
    with pytest.raises(ValueError, match=ENV_SEED):
        read_config(path, env={ENV_SEED: "not-a-number"})


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    eps=st.floats(0.0, 0.5),
    lr=st.floats(1e-4, 1.0),
    n_per=st.integers(2, 200),
    tau=st.floats(0.0, 10.0),
)
def test_roundtrip_property(seed, eps, lr, n_per, tau):
    cfg = ExperimentConfig(
        seed=seed,
        train=dataclasses.replace(ExperimentConfig().train, epsilon=eps,
                                  learning_rate=lr),
        n_per_domain=n_per,
        tau=tau,
    )
    text = format_config(cfg)
    assert parse_config(text) == cfg
    assert format_config(parse_config(text)) == text
