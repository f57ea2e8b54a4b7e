"""Synthetic 3-channel EM trace generator with planted features.

Every trace is a sum of independently switchable sources:
  * Gaussian sensor noise (noise_sigma), fresh per trace and channel.
  * A device tone at device_tone_hz, present iff the class is "on". This is
    the genuine, domain-invariant feature.
  * Per-domain background tones whose amplitudes shift slightly with the
    class (on gets amp*(1+shift), off gets amp*(1-shift)), so they are
    class-correlated within a collection but do not transfer across domains.
  * An optional always-on interferer tone per domain, placed near the device
    tone so that coarse spectrogram rows confound the two.
  * A fragile pattern: a handful of windowed tone bursts ("atoms") at fixed
    (channel, frame, frequency-bin) slots keyed to the (domain, class) pair.
    Within a collection the atoms separate the classes perfectly, but their
    amplitude is tiny, so small input noise destroys them and they never
    transfer to a held-out collection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_FRAGILE_TAG = 0x46524147  # "FRAG"
_NOISE_TAG = 0x4E4F4953  # "NOIS"

MAGIC = b"EMTRACE1"
ON, OFF = 1, 0


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything needed to regenerate a scenario bit-for-bit."""

    sample_rate: float = 200_000.0
    trace_duration: float = 0.1
    n_domains: int = 6
    device_tone_hz: float = 50_000.0
    device_tone_amplitude: float = 0.25
    # per domain: tuple of (hz, amplitude) pairs
    background_tones: tuple = ()
    background_class_shift: float = 0.0
    background_channel: int = -1  # -1: all channels, else the one pickup channel
    # per domain: interferer frequency in Hz (empty tuple disables)
    interferer_tones: tuple = ()
    interferer_amplitude: float = 0.0
    fragile_amplitude: float = 0.03  # target height in normalized spectrogram units
    fragile_gain: float = 0.0  # raw waveform amplitude of one atom burst
    fragile_atoms: int = 10
    fragile_window_len: int = 512  # burst length; match the STFT window
    noise_sigma: float = 0.0
    class_balance: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_domains < 2:
            raise ValueError("n_domains must be >= 2")
        if not self.device_tone_hz < self.sample_rate / 2:
            raise ValueError("device_tone_hz must be below Nyquist")
        amps = [self.device_tone_amplitude, self.interferer_amplitude,
                self.fragile_amplitude, self.fragile_gain, self.noise_sigma]
        if self.background_tones:
            if len(self.background_tones) != self.n_domains:
                raise ValueError("background_tones must list one tuple per domain")
            for tones in self.background_tones:
                for hz, amp in tones:
                    amps.append(amp)
                    if not hz < self.sample_rate / 2:
                        raise ValueError("background tone above Nyquist")
        if self.interferer_tones and len(self.interferer_tones) != self.n_domains:
            raise ValueError("interferer_tones must list one frequency per domain")
        if self.background_channel not in (-1, 0, 1, 2):
            raise ValueError("background_channel must be -1 or one of 0, 1, 2")
        if any(a < 0 for a in amps):
            raise ValueError("amplitudes must be >= 0")
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError("class_balance must be in (0, 1)")

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.trace_duration))


@dataclass(frozen=True)
class Atom:
    """One fragile tone burst: its channel, STFT frame, FFT bin and phase."""

    channel: int
    frame: int
    freq_bin: int
    phase: float


@dataclass
class Trace:
    channels: np.ndarray  # (3, n_samples)
    class_label: int  # ON or OFF
    domain_label: int
    sample_rate: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != 3:
            raise ValueError(f"channels must be (3, n), got {self.channels.shape}")


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    buffer_fraction: float


def _n_frames(spec: ScenarioSpec) -> int:
    w = spec.fragile_window_len
    return (spec.n_samples - w) // (w // 2) + 1


def fragile_atoms_for(spec: ScenarioSpec, domain: int, class_label: int):
    """The fixed atom set keyed to (scenario seed, domain, class)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, _FRAGILE_TAG, domain, class_label])
    )
    w = spec.fragile_window_len
    per_bin = spec.sample_rate / w
    forbidden = {int(round(spec.device_tone_hz / per_bin))}
    if spec.interferer_tones:
        forbidden.add(int(round(spec.interferer_tones[domain] / per_bin)))
    if spec.background_tones:
        for hz, _ in spec.background_tones[domain]:
            forbidden.add(int(round(hz / per_bin)))
    lo, hi = 16, int(0.75 * (w // 2))
    pool = [b for b in range(lo, hi)
            if all(abs(b - f) > 3 for f in forbidden)]
    if len(pool) < spec.fragile_atoms:
        raise ValueError("not enough clear frequency bins for the fragile atoms")
    bins = rng.choice(len(pool), size=spec.fragile_atoms, replace=False)
    frames = rng.integers(0, _n_frames(spec), size=spec.fragile_atoms)
    chans = rng.integers(0, 3, size=spec.fragile_atoms)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.fragile_atoms)
    return tuple(
        Atom(int(c), int(f), pool[int(b)], float(p))
        for c, f, b, p in zip(chans, frames, bins, phases)
    )


def _add_atoms(channels: np.ndarray, spec: ScenarioSpec, atoms):
    if spec.fragile_gain == 0.0:
        return
    w = spec.fragile_window_len
    hop = w // 2
    envelope = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(w) / w)
    k = np.arange(w)
    for atom in atoms:
        start = atom.frame * hop
        burst = envelope * np.cos(2.0 * np.pi * atom.freq_bin * k / w + atom.phase)
        channels[atom.channel, start:start + w] += spec.fragile_gain * burst


def generate_collection(spec: ScenarioSpec, domain: int, class_label: int,
                        n_traces: int) -> list:
    """n_traces of one (domain, class) cell; deterministic in (spec.seed, domain, class)."""
    if not 0 <= domain < spec.n_domains:
        raise ValueError(f"domain {domain} outside [0, {spec.n_domains})")
    if class_label not in (ON, OFF):
        raise ValueError(f"class_label must be {ON} or {OFF}")
    n = spec.n_samples
    t = np.arange(n) / spec.sample_rate
    base = np.zeros(n)
    if class_label == ON and spec.device_tone_amplitude > 0:
        base += spec.device_tone_amplitude * np.sin(2.0 * np.pi * spec.device_tone_hz * t)
    shift = spec.background_class_shift
    bg_used = []
    background = np.zeros(n)
    if spec.background_tones:
        for hz, amp in spec.background_tones[domain]:
            eff = amp * (1.0 + shift) if class_label == ON else amp * (1.0 - shift)
            bg_used.append((hz, eff))
            background += eff * np.sin(2.0 * np.pi * hz * t)
    interferer = None
    if spec.interferer_tones and spec.interferer_amplitude > 0:
        hz = spec.interferer_tones[domain]
        interferer = (hz, spec.interferer_amplitude)
        base += spec.interferer_amplitude * np.sin(2.0 * np.pi * hz * t)

    atoms = fragile_atoms_for(spec, domain, class_label)
    provenance = {
        "device_tone": class_label == ON and spec.device_tone_amplitude > 0,
        "background": tuple(bg_used),
        "interferer": interferer,
        "fragile": atoms if spec.fragile_gain > 0 else (),
        "noise_sigma": spec.noise_sigma,
    }
    traces = []
    for i in range(n_traces):
        channels = np.broadcast_to(base, (3, n)).copy()
        if spec.background_channel < 0:
            channels += background
        else:
            channels[spec.background_channel] += background
        _add_atoms(channels, spec, atoms)
        if spec.noise_sigma > 0:
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, _NOISE_TAG, domain, class_label, i])
            )
            channels += rng.normal(0.0, spec.noise_sigma, size=(3, n))
        traces.append(
            Trace(channels, class_label, domain, spec.sample_rate, dict(provenance))
        )
    return traces


def tone_energy(channels: np.ndarray, sample_rate: float, hz: float) -> float:
    """Single-frequency bandpass energy: |projection onto e^{-2pi i hz t}|, channel mean."""
    n = channels.shape[-1]
    probe = np.exp(-2j * np.pi * hz * np.arange(n) / sample_rate)
    return float(np.mean(np.abs(channels @ probe)) / n)


def split_dataset(collections, train_fraction: float = 0.8,
                  buffer_fraction: float = 0.05,
                  held_out_test_collections=()) -> DatasetSplit:
    """Chronological split per collection; held-out collections feed only the test set."""
    held = set(held_out_test_collections)
    if not held:
        raise ValueError("at least one collection must be held out for test")
    bad = [d for d in held if not 0 <= d < len(collections)]
    if bad:
        raise ValueError(f"held-out indices {bad} outside [0, {len(collections)})")
    if len(held) == len(collections):
        raise ValueError("cannot hold out every collection")
    train, validation, test = [], [], []
    for d, traces in enumerate(collections):
        if d in held:
            test.extend(traces)
            continue
        n = len(traces)
        n_train = int(train_fraction * n + 1e-9)
        n_buffer = int(buffer_fraction * n + 1e-9)
        if n_train + n_buffer >= n:
            raise ValueError(
                f"collection {d}: buffer leaves no validation windows "
                f"({n_train} train + {n_buffer} buffer >= {n})"
            )
        train.extend(traces[:n_train])
        validation.extend(traces[n_train + n_buffer:])
    return DatasetSplit(train, validation, test, buffer_fraction)


# --- persistence ------------------------------------------------------------

def write_trace(path, trace: Trace):
    c, n = trace.channels.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", c, n))
        fh.write(trace.channels.astype("<f8").tobytes())
        fh.write(struct.pack("<BH", trace.class_label, trace.domain_label))


def read_trace(path, sample_rate: float) -> Trace:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: bad magic, not an EMTRACE1 file")
    c, n = struct.unpack_from("<IQ", blob, len(MAGIC))
    off = len(MAGIC) + 12
    expect = off + c * n * 8 + 3
    if len(blob) != expect:
        raise ValueError(f"{path}: expected {expect} bytes, found {len(blob)}")
    channels = np.frombuffer(blob, dtype="<f8", count=c * n, offset=off).reshape(c, n)
    cls, dom = struct.unpack_from("<BH", blob, off + c * n * 8)
    return Trace(channels.copy(), cls, dom, sample_rate)


def _fmt_tones(tones) -> str:
    return "|".join(
        ";".join(f"{float(hz)!r}:{float(amp)!r}" for hz, amp in dom) for dom in tones
    )


def _parse_tones(text: str):
    if not text:
        return ()
    out = []
    for dom in text.split("|"):
        pairs = []
        for item in dom.split(";"):
            if item:
                hz, amp = item.split(":")
                pairs.append((float(hz), float(amp)))
        out.append(tuple(pairs))
    return tuple(out)


def write_manifest(path, spec: ScenarioSpec):
    lines = [
        f"sample_rate = {spec.sample_rate!r}",
        f"trace_duration = {spec.trace_duration!r}",
        f"n_domains = {spec.n_domains}",
        f"device_tone_hz = {spec.device_tone_hz!r}",
        f"device_tone_amplitude = {spec.device_tone_amplitude!r}",
        f"background_tones = {_fmt_tones(spec.background_tones)}",
        f"background_class_shift = {spec.background_class_shift!r}",
        f"background_channel = {spec.background_channel}",
        f"interferer_tones = {'|'.join(repr(float(h)) for h in spec.interferer_tones)}",
        f"interferer_amplitude = {spec.interferer_amplitude!r}",
        f"fragile_amplitude = {spec.fragile_amplitude!r}",
        f"fragile_gain = {spec.fragile_gain!r}",
        f"fragile_atoms = {spec.fragile_atoms}",
        f"fragile_window_len = {spec.fragile_window_len}",
        f"noise_sigma = {spec.noise_sigma!r}",
        f"class_balance = {spec.class_balance!r}",
        f"seed = {spec.seed}",
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> ScenarioSpec:
    kv = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    return ScenarioSpec(
        sample_rate=float(kv["sample_rate"]),
        trace_duration=float(kv["trace_duration"]),
        n_domains=int(kv["n_domains"]),
        device_tone_hz=float(kv["device_tone_hz"]),
        device_tone_amplitude=float(kv["device_tone_amplitude"]),
        background_tones=_parse_tones(kv["background_tones"]),
        background_class_shift=float(kv["background_class_shift"]),
        background_channel=int(kv.get("background_channel", "-1")),
        interferer_tones=tuple(
            float(h) for h in kv["interferer_tones"].split("|") if h
        ),
        interferer_amplitude=float(kv["interferer_amplitude"]),
        fragile_amplitude=float(kv["fragile_amplitude"]),
        fragile_gain=float(kv["fragile_gain"]),
        fragile_atoms=int(kv["fragile_atoms"]),
        fragile_window_len=int(kv["fragile_window_len"]),
        noise_sigma=float(kv["noise_sigma"]),
        class_balance=float(kv["class_balance"]),
        seed=int(kv["seed"]),
    )


def write_traces(directory, traces, spec: ScenarioSpec):
    """One EMTRACE1 file per trace plus the scenario manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_manifest(directory / "manifest.txt", spec)
    for i, trace in enumerate(traces):
        write_trace(directory / f"trace_{i:05d}.bin", trace)


def read_traces(directory):
    directory = Path(directory)
    spec = read_manifest(directory / "manifest.txt")
    traces = [
        read_trace(p, spec.sample_rate)
        for p in sorted(directory.glob("trace_*.bin"))
    ]
    return traces, spec
