"""Training orchestration for the three network types plus evaluation helpers.

CNN is DANN with lambda = 0 (identical code path; the domain head still
trains, the extractor just never hears about it). OTF trains on the training
collections only. TCI folds the held-out test items into the training pool
with the Unknown class target and their true domain label; their class labels
are never read anywhere in this module, which the scrambled-label test
witnesses bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import UNKNOWN
from .datasets import SpectraSet
from .network import DannConfig, DannModel, fresh_velocity, predict_label, total_loss
from .perturb import perturb
from .pipeline import SpectraSplit

MODES = ("CNN", "OTF", "TCI")
_TRAIN_TAG = 0x54524E


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "CNN"
    lam: float = 0.0
    epsilon: float = 0.0
    penalty: float = 500.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 60
    seed: int = 0
    tci_fraction: float | None = None  # None: proportional to pool sizes
    keep: str = "all"  # "all" | "best" snapshot retention
    snapshot_cap: int = 200

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "CNN" and self.lam != 0.0:
            raise ValueError("CNN mode requires lam = 0 (CNN is DANN with lambda 0)")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.keep not in ("all", "best"):
            raise ValueError("keep must be 'all' or 'best'")
        if self.tci_fraction is not None and not 0.0 < self.tci_fraction < 1.0:
            raise ValueError("tci_fraction must be in (0, 1)")
        if self.keep == "all" and self.epochs > self.snapshot_cap:
            raise ValueError(
                f"epochs {self.epochs} exceed snapshot_cap {self.snapshot_cap}; "
                "raise the cap or keep='best'"
            )


@dataclass
class SplitEval:
    label_acc: float
    domain_acc: float
    label_loss: float
    domain_loss: float


@dataclass
class EpochMetrics:
    epoch: int
    train_label_acc: float
    val_label_acc: float
    test_label_acc: float
    domain_acc: float  # on train-visible data (train + folded test for TCI)
    label_loss: float  # mean over the training pool, training targets
    domain_loss: float
    splits: dict = field(default_factory=dict)  # split name -> SplitEval

    def __post_init__(self):
        for acc in (self.train_label_acc, self.val_label_acc, self.domain_acc):
            if not (math.isnan(acc) or 0.0 <= acc <= 100.0):
                raise ValueError(f"accuracy {acc} outside [0, 100]")


@dataclass
class TrainResult:
    snapshots: list
    metrics: list
    best_epoch: int
    best_model: DannModel


def visible_domain_ids(split: SpectraSplit, mode: str):
    ids = set(int(d) for d in split.train.domain)
    if mode == "TCI":
        ids |= set(int(d) for d in split.test.domain)
    return tuple(sorted(ids))


def model_for(split: SpectraSplit, cfg: TrainConfig, feature_dim: int = 0,
              conv_channels=(8,), hidden_dim: int = 0) -> DannModel:
    """A DannModel sized to the data: N from train labels, D from visible domains.

    The default shape (one conv block, flat features, linear heads) is what
    the scenario presets are calibrated against: deeper stacks shrink the
    class signal below what SGD can pick up under the A-penalty transient.
    """
    known = sorted(set(int(y) for y in split.train.y))
    n_classes = len(known)
    if known != list(range(n_classes)):
        raise ValueError(f"train class labels must be 0..N-1, got {known}")
    ids = visible_domain_ids(split, cfg.mode)
    if cfg.lam != 0.0 and len(ids) < 2:
        raise ValueError("lambda != 0 needs at least 2 visible domains")
    return DannModel(DannConfig(
        n_known_classes=n_classes,
        n_domains=len(ids),
        lam=cfg.lam,
        penalty=cfg.penalty,
        feature_dim=feature_dim,
        conv_channels=tuple(conv_channels),
        hidden_dim=hidden_dim,
        input_shape=tuple(split.train.X.shape[1:]),
        seed=cfg.seed,
        domain_ids=ids,
    ))


def _dense_domains(raw, config: DannConfig) -> np.ndarray:
    return np.array([config.domain_index(int(d)) for d in raw], dtype=np.int64)


def _forward_probs(model: DannModel, X: np.ndarray, chunk: int = 64):
    """Label and domain probabilities without keeping graphs around."""
    label, domain = [], []
    for lo in range(0, X.shape[0], chunk):
        fwd = model.forward(X[lo:lo + chunk])
        label.append(fwd.label_probs.value)
        domain.append(fwd.domain_probs.value)
    return np.concatenate(label), np.concatenate(domain)


def _pool_eval(model: DannModel, X, targets, dense_dom, penalty) -> SplitEval:
    label_p, domain_p = _forward_probs(model, X)
    known = targets != UNKNOWN
    if known.any():
        label_acc = 100.0 * float(
            np.mean(predict_label(label_p[known]) == targets[known])
        )
    else:
        label_acc = float("nan")
    domain_acc = 100.0 * float(np.mean(np.argmax(domain_p, axis=1) == dense_dom))
    n = X.shape[0]
    picked = label_p[np.arange(n), np.where(known, targets, 0)]
    label_losses = penalty * label_p[:, -1] - np.where(
        known, np.log(picked + ad.ETA), 0.0
    )
    domain_losses = -np.log(domain_p[np.arange(n), dense_dom] + ad.ETA)
    return SplitEval(label_acc, domain_acc,
                     float(label_losses.mean()), float(domain_losses.mean()))


def evaluate_full(model: DannModel, ds: SpectraSet, penalty: float) -> SplitEval:
    """Clean evaluation of one labeled split; domain metrics cover only items
    whose domain is visible to this model (nan when none are)."""
    if len(ds) == 0:
        return SplitEval(float("nan"), float("nan"), float("nan"), float("nan"))
    label_p, domain_p = _forward_probs(model, ds.X)
    label_acc = 100.0 * float(np.mean(predict_label(label_p) == ds.y))
    n = len(ds)
    picked = label_p[np.arange(n), ds.y]
    label_loss = float(np.mean(penalty * label_p[:, -1] - np.log(picked + ad.ETA)))

    cfg = model.config
    vis = cfg.domain_ids or tuple(range(cfg.n_domains))
    mask = np.isin(ds.domain, vis)
    if mask.any():
        dense = _dense_domains(ds.domain[mask], cfg)
        dp = domain_p[mask]
        domain_acc = 100.0 * float(np.mean(np.argmax(dp, axis=1) == dense))
        domain_loss = float(np.mean(-np.log(dp[np.arange(len(dense)), dense] + ad.ETA)))
    else:
        domain_acc, domain_loss = float("nan"), float("nan")
    return SplitEval(label_acc, domain_acc, label_loss, domain_loss)


def evaluate(model: DannModel, ds: SpectraSet, penalty: float = 500.0):
    """(label accuracy %, domain accuracy %) on clean data."""
    ev = evaluate_full(model, ds, penalty)
    return ev.label_acc, ev.domain_acc


def _batch_indices(rng, n_train, n_test, cfg: TrainConfig):
    """One epoch's batches over the pool; folded test indices live at n_train+i."""
    if n_test == 0 or cfg.tci_fraction is None:
        order = rng.permutation(n_train + n_test)
        return [order[lo:lo + cfg.batch_size]
                for lo in range(0, order.size, cfg.batch_size)]
    n_test_pb = min(cfg.batch_size - 1, max(1, round(cfg.batch_size * cfg.tci_fraction)))
    n_train_pb = cfg.batch_size - n_test_pb
    train_order = rng.permutation(n_train)
    test_order = rng.permutation(n_test) + n_train
    batches = []
    steps = math.ceil(n_train / n_train_pb)
    for i in range(steps):
        a = train_order[i * n_train_pb:(i + 1) * n_train_pb]
        b = np.take(test_order, range(i * n_test_pb, (i + 1) * n_test_pb),
                    mode="wrap")
        batches.append(np.concatenate([a, b]))
    return batches


def train(model: DannModel, split: SpectraSplit, cfg: TrainConfig) -> TrainResult:
    """Run the full loop; returns per-epoch snapshots, metrics, and the best epoch."""
    if len(split.train) == 0 or len(split.validation) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if cfg.mode == "TCI" and len(split.test) == 0:
        raise ValueError("TCI mode requires a non-empty test pool to fold in")
    if model.config.lam != cfg.lam:
        raise ValueError(
            f"model lam {model.config.lam} does not match config lam {cfg.lam}"
        )
    ids = visible_domain_ids(split, cfg.mode)
    if model.config.domain_ids != ids:
        raise ValueError(
            f"model domain_ids {model.config.domain_ids} do not match data {ids}"
        )

    n_train = len(split.train)
    if cfg.mode == "TCI":
        pool_X = np.concatenate([split.train.X, split.test.X])
        pool_targets = np.concatenate(
            [split.train.y, np.full(len(split.test), UNKNOWN, dtype=np.int64)]
        )
        pool_raw_dom = np.concatenate([split.train.domain, split.test.domain])
        n_test = len(split.test)
    else:
        pool_X, pool_targets = split.train.X, split.train.y
        pool_raw_dom = split.train.domain
        n_test = 0
    pool_dense = _dense_domains(pool_raw_dom, model.config)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _TRAIN_TAG]))
    velocity = fresh_velocity(model)
    snapshots, metrics = [], []
    best_epoch, best_val, best_model = 0, -np.inf, None
    for epoch in range(cfg.epochs):
        for idx in _batch_indices(rng, n_train, n_test, cfg):
            xb = perturb(pool_X[idx], cfg.epsilon, rng)
            fwd = model.forward(xb)
            loss = total_loss(fwd, pool_targets[idx], pool_dense[idx], cfg.penalty)
            ad.backward(loss)
            model.apply_gradients(fwd.params, velocity,
                                  cfg.learning_rate, cfg.momentum)

        pool = _pool_eval(model, pool_X, pool_targets, pool_dense, cfg.penalty)
        val = evaluate_full(model, split.validation, cfg.penalty)
        test = evaluate_full(model, split.test, cfg.penalty)
        metrics.append(EpochMetrics(
            epoch=epoch,
            train_label_acc=pool.label_acc,
            val_label_acc=val.label_acc,
            test_label_acc=test.label_acc,
            domain_acc=pool.domain_acc,
            label_loss=pool.label_loss,
            domain_loss=pool.domain_loss,
            splits={"train": pool, "validation": val, "test": test},
        ))
        if cfg.keep == "all":
            snapshots.append(model.clone())
        if val.label_acc > best_val:
            best_val, best_epoch, best_model = val.label_acc, epoch, model.clone()
    if cfg.keep == "best":
        snapshots = [best_model]
    return TrainResult(snapshots, metrics, best_epoch, best_model)


def select_snapshot(metrics) -> int:
    """Epoch with the highest validation accuracy; earliest on ties."""
    if not metrics:
        raise ValueError("need at least one epoch of metrics")
    vals = [m.val_label_acc for m in metrics]
    return int(np.argmax(vals))


@dataclass
class EnsembleResult:
    member_predictions: np.ndarray  # (M, K)
    votes: np.ndarray  # (K,)
    n_agree: np.ndarray  # (K,) members agreeing with the vote
    accuracy: float | None  # None when truth was not supplied


def hard_ensemble(member_predictions, truth=None) -> EnsembleResult:
    """Per-item modal vote across members; ties break to the lowest class index."""
    preds = np.asarray(member_predictions)
    if preds.ndim != 2 or preds.shape[0] < 1:
        raise ValueError(f"member predictions must be (M, K) with M >= 1, "
                         f"got shape {preds.shape}")
    m, k = preds.shape
    votes = np.empty(k, dtype=np.int64)
    agree = np.empty(k, dtype=np.int64)
    for j in range(k):
        counts = np.bincount(preds[:, j])
        votes[j] = int(np.argmax(counts))
        agree[j] = int(counts[votes[j]])
    accuracy = None
    if truth is not None:
        truth = np.asarray(truth)
        if truth.shape != (k,):
            raise ValueError(f"truth shape {truth.shape} does not match {k} items")
        accuracy = 100.0 * float(np.mean(votes == truth))
    return EnsembleResult(preds, votes, agree, accuracy)


# --- CSV streams -------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(path, metrics):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,split,label_acc,domain_acc,label_loss,domain_loss\n")
        for m in metrics:
            for name in ("train", "validation", "test"):
                ev = m.splits[name]
                if math.isnan(ev.label_acc) and math.isnan(ev.domain_acc):
                    continue  # empty split
                fh.write(f"{m.epoch},{name},{_fmt(ev.label_acc)},"
                         f"{_fmt(ev.domain_acc)},{_fmt(ev.label_loss)},"
                         f"{_fmt(ev.domain_loss)}\n")


def write_ensemble_csv(path, result: EnsembleResult, truth):
    truth = np.asarray(truth)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("item,truth,vote,n_agree\n")
        for i, (t, v, a) in enumerate(zip(truth, result.votes, result.n_agree)):
            fh.write(f"{i},{int(t)},{int(v)},{int(a)}\n")
