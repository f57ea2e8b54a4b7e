"""Line-based experiment configuration shared by every CLI subcommand.

One `key = value` per line, UTF-8, `#` comments. Keys are grouped by a dotted
prefix (scenario, stft, data, train, sweep, analysis); the handful of
top-level keys (`seed`, `output_dir`) apply to the whole run. A `preset` key
expands one of the named scenarios from `presets` before any explicit
scenario.* keys are applied, and is consumed by that expansion: the resolved
file written next to run outputs always lists every concrete field, so a run
directory can be reproduced from its own config alone.

The single `seed` drives both trace synthesis and training; per-section seed
keys deliberately do not exist. The environment variable GRLFORGE_SEED, when
set, overrides the file's seed at load time.
"""

import dataclasses
import os
from dataclasses import dataclass, field

from .spectrogram import StftParams
from .synth import ScenarioSpec, _fmt_tones, _parse_tones
from .training import TrainConfig

ENV_SEED = "GRLFORGE_SEED"

DEFAULT_EPSILON_GRID = (0.0, 0.03, 0.06, 0.12, 0.3)
DEFAULT_LAMBDA_GRID = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 500.0)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs, normalized so the one seed feeds every stage."""

    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    stft: StftParams = field(default_factory=StftParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_per_domain: int = 20
    train_fraction: float = 0.8
    buffer_fraction: float = 0.05
    held_out: tuple = (5,)
    epsilon_grid: tuple = DEFAULT_EPSILON_GRID
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    tau: float = 0.5
    replicates: int = 1
    freq_bands: int = 8
    time_blocks: int = 8
    n_perturb: int = 500
    kernel_width: float = 0.25
    class_index: int = 1
    output_dir: str = "runs/exp"
    seed: int = 0

    def __post_init__(self):
        # the one experiment seed wins over whatever the parts carried
        object.__setattr__(
            self, "scenario", dataclasses.replace(self.scenario, seed=self.seed)
        )
        object.__setattr__(
            self, "train", dataclasses.replace(self.train, seed=self.seed)
        )
        object.__setattr__(
            self, "held_out", tuple(sorted(int(d) for d in self.held_out))
        )
        object.__setattr__(
            self, "epsilon_grid", tuple(float(v) for v in self.epsilon_grid)
        )
        object.__setattr__(
            self, "lambda_grid", tuple(float(v) for v in self.lambda_grid)
        )
        if self.n_per_domain < 2:
            raise ValueError("n_per_domain must be >= 2")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if not 0.0 <= self.buffer_fraction < 1.0:
            raise ValueError("buffer_fraction must be in [0, 1)")
        if any(d < 0 for d in self.held_out):
            raise ValueError("held_out collections must be >= 0")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.freq_bands < 1 or self.time_blocks < 1:
            raise ValueError("segment counts must be >= 1")
        if self.n_perturb < 2:
            raise ValueError("n_perturb must be >= 2")
        if self.kernel_width <= 0:
            raise ValueError("kernel_width must be > 0")
        if self.class_index < 0:
            raise ValueError("class_index must be >= 0")
        if not self.output_dir:
            raise ValueError("output_dir must be non-empty")


def _fmt(x) -> str:
    if x is None:
        return "none"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _fmt_floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _fmt_ints(values) -> str:
    return ",".join(str(int(v)) for v in values)


def _parse_floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_optional_float(text: str):
    return None if text == "none" else float(text)


def format_config(cfg: ExperimentConfig) -> str:
    """The fully-resolved, byte-stable text form (defaults filled in)."""
    sc, st, tr = cfg.scenario, cfg.stft, cfg.train
    lines = [
        "# grlforge experiment configuration (resolved)",
        f"seed = {cfg.seed}",
        f"output_dir = {cfg.output_dir}",
        "",
        "# scenario",
        f"scenario.sample_rate = {sc.sample_rate!r}",
        f"scenario.trace_duration = {sc.trace_duration!r}",
        f"scenario.n_domains = {sc.n_domains}",
        f"scenario.device_tone_hz = {sc.device_tone_hz!r}",
        f"scenario.device_tone_amplitude = {sc.device_tone_amplitude!r}",
        f"scenario.background_tones = {_fmt_tones(sc.background_tones)}",
        f"scenario.background_class_shift = {sc.background_class_shift!r}",
        f"scenario.background_channel = {sc.background_channel}",
        "scenario.interferer_tones = "
        + "|".join(repr(float(h)) for h in sc.interferer_tones),
        f"scenario.interferer_amplitude = {sc.interferer_amplitude!r}",
        f"scenario.fragile_amplitude = {sc.fragile_amplitude!r}",
        f"scenario.fragile_gain = {sc.fragile_gain!r}",
        f"scenario.fragile_atoms = {sc.fragile_atoms}",
        f"scenario.fragile_window_len = {sc.fragile_window_len}",
        f"scenario.noise_sigma = {sc.noise_sigma!r}",
        f"scenario.class_balance = {sc.class_balance!r}",
        "",
        "# spectrogram",
        f"stft.window_len = {st.window_len}",
        f"stft.hop = {st.hop}",
        f"stft.freq_max_hz = {st.freq_max_hz!r}",
        f"stft.out_freq_bins = {st.out_freq_bins}",
        f"stft.out_time_bins = {st.out_time_bins}",
        f"stft.scale = {_fmt(st.scale)}",
        f"stft.percentile = {st.percentile!r}",
        "",
        "# dataset assembly",
        f"data.n_per_domain = {cfg.n_per_domain}",
        f"data.train_fraction = {cfg.train_fraction!r}",
        f"data.buffer_fraction = {cfg.buffer_fraction!r}",
        f"data.held_out = {_fmt_ints(cfg.held_out)}",
        "",
        "# training",
        f"train.mode = {tr.mode}",
        f"train.lam = {tr.lam!r}",
        f"train.epsilon = {tr.epsilon!r}",
        f"train.penalty = {tr.penalty!r}",
        f"train.learning_rate = {tr.learning_rate!r}",
        f"train.momentum = {tr.momentum!r}",
        f"train.batch_size = {tr.batch_size}",
        f"train.epochs = {tr.epochs}",
        f"train.tci_fraction = {_fmt(tr.tci_fraction)}",
        f"train.keep = {tr.keep}",
        f"train.snapshot_cap = {tr.snapshot_cap}",
        "",
        "# hyperparameter sweeps",
        f"sweep.epsilon_grid = {_fmt_floats(cfg.epsilon_grid)}",
        f"sweep.lambda_grid = {_fmt_floats(cfg.lambda_grid)}",
        f"sweep.tau = {cfg.tau!r}",
        f"sweep.replicates = {cfg.replicates}",
        "",
        "# analysis",
        f"analysis.freq_bands = {cfg.freq_bands}",
        f"analysis.time_blocks = {cfg.time_blocks}",
        f"analysis.n_perturb = {cfg.n_perturb}",
        f"analysis.kernel_width = {cfg.kernel_width!r}",
        f"analysis.class_index = {cfg.class_index}",
    ]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    """Parse `key = value` lines; unknown keys are refused by name."""
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key in kv:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        kv[key] = value.strip()
    return config_from_items(kv)


def config_from_items(kv: dict) -> ExperimentConfig:
    kv = dict(kv)
    seed = int(kv.pop("seed", "0"))
    output_dir = kv.pop("output_dir", "runs/exp")
    preset = kv.pop("preset", "none")

    stft_kv = {k[len("stft."):]: v for k, v in kv.items() if k.startswith("stft.")}
    stft = _build_stft(stft_kv)

    scen_kv = {k[len("scenario."):]: v for k, v in kv.items()
               if k.startswith("scenario.")}
    scenario = _build_scenario(scen_kv, preset, seed, stft)

    train_kv = {k[len("train."):]: v for k, v in kv.items()
                if k.startswith("train.")}
    train = _build_train(train_kv, seed)

    known_prefixes = ("scenario.", "stft.", "train.")
    rest = {k: v for k, v in kv.items() if not k.startswith(known_prefixes)}
    fields = dict(scenario=scenario, stft=stft, train=train,
                  output_dir=output_dir, seed=seed)
    simple = {
        "data.n_per_domain": ("n_per_domain", int),
        "data.train_fraction": ("train_fraction", float),
        "data.buffer_fraction": ("buffer_fraction", float),
        "data.held_out": ("held_out", _parse_ints),
        "sweep.epsilon_grid": ("epsilon_grid", _parse_floats),
        "sweep.lambda_grid": ("lambda_grid", _parse_floats),
        "sweep.tau": ("tau", float),
        "sweep.replicates": ("replicates", int),
        "analysis.freq_bands": ("freq_bands", int),
        "analysis.time_blocks": ("time_blocks", int),
        "analysis.n_perturb": ("n_perturb", int),
        "analysis.kernel_width": ("kernel_width", float),
        "analysis.class_index": ("class_index", int),
    }
    for key, value in rest.items():
        if key not in simple:
            raise ValueError(f"unknown configuration key {key!r}")
        name, convert = simple[key]
        fields[name] = convert(value)
    return ExperimentConfig(**fields)


_SCENARIO_PARSERS = {
    "sample_rate": float,
    "trace_duration": float,
    "n_domains": int,
    "device_tone_hz": float,
    "device_tone_amplitude": float,
    "background_tones": _parse_tones,
    "background_class_shift": float,
    "background_channel": int,
    "interferer_tones": lambda t: tuple(float(h) for h in t.split("|") if h),
    "interferer_amplitude": float,
    "fragile_amplitude": float,
    "fragile_gain": float,
    "fragile_atoms": int,
    "fragile_window_len": int,
    "noise_sigma": float,
    "class_balance": float,
}

_STFT_PARSERS = {
    "window_len": int,
    "hop": int,
    "freq_max_hz": float,
    "out_freq_bins": int,
    "out_time_bins": int,
    "scale": _parse_optional_float,
    "percentile": float,
}

_TRAIN_PARSERS = {
    "mode": str,
    "lam": float,
    "epsilon": float,
    "penalty": float,
    "learning_rate": float,
    "momentum": float,
    "batch_size": int,
    "epochs": int,
    "tci_fraction": _parse_optional_float,
    "keep": str,
    "snapshot_cap": int,
}


def _convert(kv: dict, parsers: dict, section: str) -> dict:
    out = {}
    for key, value in kv.items():
        if key not in parsers:
            raise ValueError(f"unknown configuration key {section}.{key!r}")
        out[key] = parsers[key](value)
    return out


def _build_stft(kv: dict) -> StftParams:
    params = StftParams(**_convert(kv, _STFT_PARSERS, "stft"))
    params.validate()
    return params


def _build_scenario(kv: dict, preset: str, seed: int,
                    stft: StftParams) -> ScenarioSpec:
    over = _convert(kv, _SCENARIO_PARSERS, "scenario")
    if preset != "none":
        from .presets import scenario_preset  # cycle: presets builds on training

        base_kw = {"seed": seed, "params": stft}
        if "n_domains" in over:
            base_kw["n_domains"] = over.pop("n_domains")
        base = scenario_preset(preset, **base_kw)
        return dataclasses.replace(base, **over)
    return ScenarioSpec(seed=seed, **over)


def _build_train(kv: dict, seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, **_convert(kv, _TRAIN_PARSERS, "train"))


def write_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_config(cfg))


def read_config(path, env=None) -> ExperimentConfig:
    """Load a config file, honoring the GRLFORGE_SEED environment override."""
    with open(path, "r", encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    env = os.environ if env is None else env
    if ENV_SEED in env:
        try:
            seed = int(env[ENV_SEED])
        except ValueError:
            raise ValueError(f"{ENV_SEED} must be an integer, "
                             f"got {env[ENV_SEED]!r}") from None
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg
