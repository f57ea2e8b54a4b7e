"""The three-part network: feature extractor, label head, reversed domain head.

The extractor is a small conv stack ending in a feature_dim "top feature
layer"; feature_dim 0 drops that layer and exposes the flattened conv output
directly, which keeps the class signal from being squeezed through one more
small random projection. The label head adds one extra output, index N, for
the unknown class; the modified label loss puts the penalty A on that
output's probability. The domain head sees the features through a gradient
reversal layer, so lambda shapes only the backward pass and never the loss
value itself; hidden_dim 0 makes that head linear.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import UNKNOWN

MAGIC = b"DANNMDL1"
_VERSION = 1


@dataclass(frozen=True)
class DannConfig:
    n_known_classes: int = 2
    n_domains: int = 2
    lam: float = 0.0
    penalty: float = 500.0
    feature_dim: int = 64  # 0: no top layer, features = flattened conv output
    conv_channels: tuple = (8, 16)
    hidden_dim: int = 32  # 0: linear domain head
    input_shape: tuple = (3, 64, 64)
    seed: int = 0
    # raw domain labels visible to this run, in dense head order; empty
    # means the identity mapping over range(n_domains)
    domain_ids: tuple = ()

    def __post_init__(self):
        if self.n_known_classes < 2:
            raise ValueError("n_known_classes must be >= 2")
        if self.n_domains < 2:
            raise ValueError("n_domains must be >= 2")
        if not self.penalty > 0:
            raise ValueError("penalty A must be > 0")
        if self.feature_dim < 0:
            raise ValueError("feature_dim must be >= 0")
        if self.hidden_dim < 0:
            raise ValueError("hidden_dim must be >= 0")
        if self.domain_ids and len(self.domain_ids) != self.n_domains:
            raise ValueError("domain_ids must list one raw label per domain")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (channels, height, width)")

    @property
    def n_label_outputs(self) -> int:
        return self.n_known_classes + 1

    @property
    def feature_width(self) -> int:
        """Width of the feature vector the heads actually see."""
        if self.feature_dim > 0:
            return self.feature_dim
        return _conv_tail(self.input_shape, self.conv_channels)

    def domain_index(self, raw_label: int) -> int:
        """Dense head index of a raw domain label."""
        if not self.domain_ids:
            if not 0 <= raw_label < self.n_domains:
                raise ValueError(f"domain label {raw_label} outside [0, {self.n_domains})")
            return int(raw_label)
        try:
            return self.domain_ids.index(raw_label)
        except ValueError:
            raise ValueError(
                f"domain label {raw_label} not among visible domains {self.domain_ids}"
            ) from None


@dataclass
class ForwardPass:
    label_probs: ad.Node  # (B, N+1)
    domain_probs: ad.Node  # (B, D)
    features: ad.Node  # (B, feature_dim)
    params: dict  # name -> parameter Node, shared with the model arrays


def _conv_tail(shape, conv_channels):
    c, h, w = shape
    for _ in conv_channels:
        h, w = (h - 2) // 2, (w - 2) // 2
        if h < 1 or w < 1:
            raise ValueError(f"input {shape} too small for conv stack {conv_channels}")
    return conv_channels[-1] * h * w


class DannModel:
    """Owns the parameter arrays; every forward() builds a fresh graph."""

    def __init__(self, config: DannConfig):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed]))

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        c_in = config.input_shape[0]
        weights = {}
        for i, c_out in enumerate(config.conv_channels):
            weights[f"conv{i}_w"] = uniform((c_out, c_in, 3, 3), c_in * 9)
            c_in = c_out
        flat = _conv_tail(config.input_shape, config.conv_channels)
        if config.feature_dim > 0:
            weights["fc_w"] = uniform((flat, config.feature_dim), flat)
            weights["fc_b"] = uniform((config.feature_dim,), flat)
        width = config.feature_width
        weights["label_w"] = uniform((width, config.n_label_outputs), width)
        weights["label_b"] = uniform((config.n_label_outputs,), width)
        if config.hidden_dim > 0:
            weights["dom1_w"] = uniform((width, config.hidden_dim), width)
            weights["dom1_b"] = uniform((config.hidden_dim,), width)
            weights["dom2_w"] = uniform((config.hidden_dim, config.n_domains), config.hidden_dim)
            weights["dom2_b"] = uniform((config.n_domains,), config.hidden_dim)
        else:
            weights["dom2_w"] = uniform((width, config.n_domains), width)
            weights["dom2_b"] = uniform((config.n_domains,), width)
        self.weights = weights

    def clone(self) -> "DannModel":
        other = object.__new__(DannModel)
        other.config = self.config
        other.weights = {k: v.copy() for k, v in self.weights.items()}
        return other

    def forward(self, x) -> ForwardPass:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != tuple(cfg.input_shape):
            raise ad.ShapeError(
                f"forward: expected (batch, {cfg.input_shape}), got {x.shape}"
            )
        params = {k: ad.parameter(v) for k, v in self.weights.items()}
        h = ad.constant(x)
        for i in range(len(cfg.conv_channels)):
            h = ad.avgpool2(ad.relu(ad.conv2d(h, params[f"conv{i}_w"])))
        h = ad.flatten(h)
        if cfg.feature_dim > 0:
            features = ad.relu(ad.add(ad.matmul(h, params["fc_w"]), params["fc_b"]))
        else:
            features = h  # already nonnegative: conv outputs pass through relu

        label_logits = ad.add(ad.matmul(features, params["label_w"]), params["label_b"])
        label_probs = ad.softmax(label_logits)

        rev = ad.grad_reverse(features, cfg.lam)
        if cfg.hidden_dim > 0:
            rev = ad.relu(ad.add(ad.matmul(rev, params["dom1_w"]), params["dom1_b"]))
        dom_logits = ad.add(ad.matmul(rev, params["dom2_w"]), params["dom2_b"])
        domain_probs = ad.softmax(dom_logits)
        return ForwardPass(label_probs, domain_probs, features, params)

    def apply_gradients(self, params: dict, velocity: dict, lr: float, momentum: float):
        """SGD with momentum: v <- mu v + g; w <- w - lr v. Mutates the model."""
        for name, node in params.items():
            v = velocity[name]
            v *= momentum
            v += node.grad
            self.weights[name] -= lr * v


def fresh_velocity(model: DannModel) -> dict:
    return {k: np.zeros_like(v) for k, v in model.weights.items()}


# --- losses ------------------------------------------------------------------

def label_loss(y_probs, target: int, penalty: float) -> float:
    """Scalar form of the modified label loss on one probability row."""
    y = np.asarray(y_probs, dtype=np.float64)
    n_known = y.shape[-1] - 1
    out = penalty * float(y[n_known])
    if target == UNKNOWN:
        return out
    if not 0 <= target < n_known:
        raise ValueError(f"class target {target} outside [0, {n_known})")
    return out - float(np.log(y[target] + ad.ETA))


def domain_loss(domain_probs, label: int) -> float:
    """Plain categorical cross-entropy on one probability row."""
    p = np.asarray(domain_probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"domain label {label} outside [0, {p.shape[-1]})")
    return -float(np.log(p[label] + ad.ETA))


def total_loss(fwd: ForwardPass, label_targets, domain_targets,
               penalty: float) -> ad.Node:
    """Mean over the batch of (label_loss + domain_loss), as a graph node.

    Targets are integer arrays; UNKNOWN marks items whose class is never read.
    Domain targets must already be dense head indices.
    """
    label_rows = ad.penalized_cross_entropy(fwd.label_probs, label_targets, penalty)
    domain_rows = ad.penalized_cross_entropy(fwd.domain_probs, domain_targets, 0.0)
    return ad.mean_all(ad.add(label_rows, domain_rows))


def predict_label(y_probs) -> np.ndarray:
    """Argmax over the known classes only; ties break to the lowest index."""
    y = np.asarray(y_probs, dtype=np.float64)
    known = y[..., :-1]
    return np.argmax(known, axis=-1)


# --- checkpoints -------------------------------------------------------------

def _config_text(cfg: DannConfig) -> str:
    lines = [
        f"n_known_classes = {cfg.n_known_classes}",
        f"n_domains = {cfg.n_domains}",
        f"lam = {cfg.lam!r}",
        f"penalty = {cfg.penalty!r}",
        f"feature_dim = {cfg.feature_dim}",
        f"conv_channels = {','.join(str(c) for c in cfg.conv_channels)}",
        f"hidden_dim = {cfg.hidden_dim}",
        f"input_shape = {','.join(str(s) for s in cfg.input_shape)}",
        f"seed = {cfg.seed}",
        f"domain_ids = {','.join(str(d) for d in cfg.domain_ids)}",
    ]
    return "\n".join(lines) + "\n"


def _parse_config(text: str) -> DannConfig:
    kv = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()

    def ints(s):
        return tuple(int(v) for v in s.split(",") if v)

    return DannConfig(
        n_known_classes=int(kv["n_known_classes"]),
        n_domains=int(kv["n_domains"]),
        lam=float(kv["lam"]),
        penalty=float(kv["penalty"]),
        feature_dim=int(kv["feature_dim"]),
        conv_channels=ints(kv["conv_channels"]),
        hidden_dim=int(kv["hidden_dim"]),
        input_shape=ints(kv["input_shape"]),
        seed=int(kv["seed"]),
        domain_ids=ints(kv["domain_ids"]),
    )


def save_model(path, model: DannModel):
    blob = _config_text(model.config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for tensor in model.weights.values():
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.astype("<f8").tobytes())


def load_model(path) -> DannModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a DANNMDL1 checkpoint")
    version, text_len = struct.unpack_from("<II", blob, len(MAGIC))
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = len(MAGIC) + 8
    config = _parse_config(blob[off:off + text_len].decode("utf-8"))
    off += text_len
    model = DannModel(config)
    for name in model.weights:
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        tensor = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += count * 8
        if tuple(shape) != model.weights[name].shape:
            raise ValueError(
                f"{path}: tensor {name} has shape {tuple(shape)}, "
                f"expected {model.weights[name].shape}"
            )
        model.weights[name] = tensor.reshape(shape).copy()
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return model
