"""Feature-usefulness audits, the sign-linear classifier, and LIME explanations.

Usefulness follows the rho/gamma formalism: rho is the expected product of the
+-1 label with a scalar feature, gamma is the same expectation after the worst
L-infinity perturbation of radius epsilon. For linear features that infimum
has a closed form (it sits at a sign vertex), which the brute-force vertex
enumeration in the tests confirms. LIME fits a weighted least-squares
surrogate over random segment masks of one spectrogram.
"""

import math
from dataclasses import dataclass

import numpy as np

from .spectrogram import _block_bounds

_LIME_TAG = 0x4C494D45
_VERTEX_TAG = 0x56455254

METHODS = ("exact-linear", "sampled")


@dataclass(frozen=True)
class FeatureFn:
    """Scalar feature of a flattened input; `linear` optionally pins (w, bias)."""

    fn: object  # callable: 1-D input vector -> real
    linear: tuple | None = None  # (weights (n,), bias)

    def __call__(self, x) -> float:
        return float(self.fn(np.asarray(x, dtype=np.float64)))


def linear_feature(w, bias: float = 0.0) -> FeatureFn:
    w = np.asarray(w, dtype=np.float64)
    return FeatureFn(fn=lambda x, _w=w, _b=float(bias): float(_w @ x + _b),
                     linear=(w, float(bias)))


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("usefulness needs at least one labelled item")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must lie in {-1, +1}")
    return y


def _evaluate(f: FeatureFn, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    vals = np.asarray([f(x) for x in X], dtype=np.float64)
    if f.linear is not None:
        w, b = f.linear
        if np.max(np.abs(vals - (X @ w + b)), initial=0.0) > 1e-9:
            raise ValueError("FeatureFn.linear disagrees with its fn evaluation")
    return vals


def rho_usefulness(f: FeatureFn, X, y) -> float:
    """Sample mean of y * f(x) over the dataset."""
    y = _check_labels(y)
    return float(np.mean(y * _evaluate(f, X)))


def gamma_usefulness(f: FeatureFn, X, y, epsilon: float,
                     method: str = "exact-linear", n_vertices: int = 32,
                     seed: int = 0) -> float:
    """Mean worst-case y * f(x + delta) over the L-inf ball of radius epsilon.

    exact-linear uses the closed form y*f(x) - epsilon*||w||_1; sampled takes
    the min over n_vertices random sign vertices plus the clean point, so it
    upper-bounds the true infimum and works for any feature.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    y = _check_labels(y)
    X = np.asarray(X, dtype=np.float64)
    clean = y * _evaluate(f, X)
    if method == "exact-linear":
        if f.linear is None:
            raise ValueError("exact-linear method needs a FeatureFn with a linear form")
        w, _ = f.linear
        return float(np.mean(clean - epsilon * np.sum(np.abs(w))))
    rng = np.random.default_rng(np.random.SeedSequence([seed, _VERTEX_TAG]))
    worst = clean.copy()
    for i, x in enumerate(X):
        signs = rng.integers(0, 2, size=(n_vertices, x.size)) * 2 - 1
        vals = np.asarray([f(x + epsilon * s) for s in signs])
        worst[i] = min(worst[i], float(np.min(y[i] * vals)))
    return float(np.mean(worst))


@dataclass(frozen=True)
class UsefulnessReport:
    feature: str
    rho: float
    gamma: float
    epsilon: float
    method: str
    n: int
    stderr: float  # of the per-item products behind the rho estimate

    def __post_init__(self):
        if self.gamma > self.rho + 1e-9:
            raise ValueError("gamma estimate cannot exceed the rho estimate")


def audit_feature(f: FeatureFn, X, y, epsilon: float, name: str = "f0",
                  method: str = "exact-linear", n_vertices: int = 32,
                  seed: int = 0) -> UsefulnessReport:
    y = _check_labels(y)
    products = y * _evaluate(f, X)
    stderr = float(products.std(ddof=1) / math.sqrt(len(products))) if len(products) > 1 else 0.0
    return UsefulnessReport(
        feature=name,
        rho=float(products.mean()),
        gamma=gamma_usefulness(f, X, y, epsilon, method, n_vertices, seed),
        epsilon=float(epsilon),
        method=method,
        n=int(len(products)),
        stderr=stderr,
    )


@dataclass(frozen=True)
class LinearClassifier:
    """C(x) = sgn(b + sum w_f * f(x)), with sgn(0) = +1 by convention."""

    bias: float
    terms: tuple = ()  # (weight, FeatureFn) pairs


def classify_linear(c: LinearClassifier, x) -> int:
    s = c.bias + sum(w * f(x) for w, f in c.terms)
    return 1 if s >= 0 else -1


# --- LIME ----------------------------------------------------------------------

@dataclass(frozen=True)
class GridSegmentation:
    """Regular freq-band x time-block partition of an (F, T) spectrogram grid."""

    shape: tuple  # (F, T)
    n_freq_bands: int = 8
    n_time_blocks: int = 8

    def __post_init__(self):
        F, T = self.shape
        if not (1 <= self.n_freq_bands <= F and 1 <= self.n_time_blocks <= T):
            raise ValueError("segment counts must be in [1, grid extent]")

    @property
    def n_segments(self) -> int:
        return self.n_freq_bands * self.n_time_blocks

    def ids(self) -> np.ndarray:
        F, T = self.shape
        rows = np.searchsorted(_block_bounds(F, self.n_freq_bands)[1:], np.arange(F),
                               side="right")
        cols = np.searchsorted(_block_bounds(T, self.n_time_blocks)[1:], np.arange(T),
                               side="right")
        return rows[:, None] * self.n_time_blocks + cols[None, :]

    def freq_band(self, segment: int) -> int:
        return segment // self.n_time_blocks

    def time_block(self, segment: int) -> int:
        return segment % self.n_time_blocks

    def band_center_row(self, band: int) -> int:
        bounds = _block_bounds(self.shape[0], self.n_freq_bands)
        return int((bounds[band] + max(bounds[band] + 1, bounds[band + 1]) - 1) // 2)


@dataclass(frozen=True)
class LimeExplanation:
    coefficients: np.ndarray  # one weight per segment
    intercept: float
    segmentation: GridSegmentation
    kernel_width: float
    n_perturb: int

    def __post_init__(self):
        object.__setattr__(self, "coefficients",
                           np.asarray(self.coefficients, dtype=np.float64))
        if self.coefficients.shape != (self.segmentation.n_segments,):
            raise ValueError("one coefficient per segment required")


def lime_explain(blackbox, x, segmentation: GridSegmentation, n_perturb: int = 500,
                 kernel_width: float = 0.25, seed: int = 0) -> LimeExplanation:
    """Fit a weighted linear surrogate to `blackbox` around one spectrogram.

    `blackbox` maps a batch (m, planes, F, T) to (m,) probabilities of the
    explained class. Each of the n_perturb masks keeps every segment with
    p = 0.5 and zeroes dropped segments across all planes; sample weights are
    exp(-d^2 / kernel_width^2) with d the fraction of segments dropped. The
    least-squares fit is exact for affine blackboxes once n_perturb comfortably
    exceeds the segment count.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != segmentation.shape:
        raise ValueError(
            f"input shape {x.shape} does not sit on segmentation grid "
            f"{segmentation.shape}"
        )
    if n_perturb < 2:
        raise ValueError("n_perturb must be >= 2")
    if kernel_width <= 0:
        raise ValueError("kernel_width must be > 0")
    S = segmentation.n_segments
    rng = np.random.default_rng(np.random.SeedSequence([seed, _LIME_TAG]))
    keep = rng.integers(0, 2, size=(n_perturb, S))
    if np.all(keep == keep[0]):
        raise ValueError("degenerate mask draw: all masks identical")

    ids = segmentation.ids()
    masked = x[None, :, :, :] * keep[:, ids][:, None, :, :]
    preds = np.asarray(blackbox(masked), dtype=np.float64)
    if preds.shape != (n_perturb,):
        raise ValueError("blackbox must return one probability per mask")

    d = 1.0 - keep.mean(axis=1)
    sw = np.sqrt(np.exp(-(d ** 2) / kernel_width ** 2))
    design = np.concatenate([np.ones((n_perturb, 1)), keep], axis=1) * sw[:, None]
    beta, *_ = np.linalg.lstsq(design, preds * sw, rcond=None)
    return LimeExplanation(beta[1:], float(beta[0]), segmentation,
                           float(kernel_width), int(n_perturb))


def aggregate_frequency_importance(explanations) -> np.ndarray:
    """Per-frequency-band importance: mean |coefficient|, summed over time blocks.

    Normalized so the peak band is 1 (an all-zero aggregate stays zero).
    """
    explanations = list(explanations)
    if not explanations:
        raise ValueError("nothing to aggregate")
    seg = explanations[0].segmentation
    if any(e.segmentation != seg for e in explanations):
        raise ValueError("mixed segmentations cannot be aggregated")
    stacked = np.abs(np.stack([e.coefficients for e in explanations]))
    per_segment = stacked.mean(axis=0)
    per_band = per_segment.reshape(seg.n_freq_bands, seg.n_time_blocks).sum(axis=1)
    peak = per_band.max()
    return per_band / peak if peak > 0 else per_band


def dann_blackbox(model, class_index: int, chunk: int = 32):
    """Batch probability of one label-head class, for LIME queries."""

    def query(batch):
        batch = np.asarray(batch, dtype=np.float64)
        out = np.empty(len(batch), dtype=np.float64)
        for lo in range(0, len(batch), chunk):
            fwd = model.forward(batch[lo:lo + chunk])
            out[lo:lo + chunk] = fwd.label_probs.value[:, class_index]
        return out

    return query


# --- CSV output ------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def write_usefulness_csv(path, reports) -> None:
    lines = ["feature,rho,gamma,epsilon,method,stderr,n"]
    for r in reports:
        lines.append(
            f"{r.feature},{_fmt(r.rho)},{_fmt(r.gamma)},{_fmt(r.epsilon)},"
            f"{r.method},{_fmt(r.stderr)},{r.n}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_explanation_csv(path, explanation: LimeExplanation) -> None:
    seg = explanation.segmentation
    lines = ["segment,freq_band,time_block,coefficient"]
    for s in range(seg.n_segments):
        lines.append(
            f"{s},{seg.freq_band(s)},{seg.time_block(s)},"
            f"{_fmt(explanation.coefficients[s])}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_frequency_importance_csv(path, freqs_hz, importance) -> None:
    freqs_hz = np.asarray(freqs_hz, dtype=np.float64)
    importance = np.asarray(importance, dtype=np.float64)
    if freqs_hz.shape != importance.shape:
        raise ValueError("freqs_hz and importance must align")
    lines = ["freq_bin_hz,importance"]
    for hz, imp in zip(freqs_hz, importance):
        lines.append(f"{_fmt(hz)},{_fmt(imp)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
