"""Scikit-learn style classifier facade over the DANN training loop.

DannClassifier keeps the familiar fit/predict surface while exposing the
domain-adversarial knobs as constructor parameters, so it drops into sklearn
tooling (get_params/set_params, clone, scoring). Domain labels are mandatory:
the architecture always carries a domain head, and two collections is the
minimum for it to mean anything.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .datasets import SpectraSet
from .network import predict_label
from .pipeline import SpectraSplit
from .training import TrainConfig, _forward_probs, model_for, train
from .validation import check_class_labels, check_domain_labels, check_spectra

_VAL_TAG = 0x56414C


class DannClassifier(ClassifierMixin, BaseEstimator):
    """Domain-adversarial classifier with the modified (penalized) label loss."""

    def __init__(self, mode: str = "OTF", lam: float = 0.0, epsilon: float = 0.0,
                 penalty: float = 500.0, learning_rate: float = 0.01,
                 momentum: float = 0.9, batch_size: int = 16, epochs: int = 60,
                 validation_fraction: float = 0.2, feature_dim: int = 0,
                 conv_channels=(8,), hidden_dim: int = 0,
                 tci_fraction: float | None = None, seed: int = 0):
        self.mode = mode
        self.lam = lam
        self.epsilon = epsilon
        self.penalty = penalty
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.validation_fraction = validation_fraction
        self.feature_dim = feature_dim
        self.conv_channels = conv_channels
        self.hidden_dim = hidden_dim
        self.tci_fraction = tci_fraction
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode, lam=self.lam, epsilon=self.epsilon, penalty=self.penalty,
            learning_rate=self.learning_rate, momentum=self.momentum,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
            tci_fraction=self.tci_fraction, keep="best",
        )

    def _carve_validation(self, n: int, y_dense: np.ndarray):
        """Per-class holdout indices; every class keeps at least one train item."""
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, _VAL_TAG]))
        val_idx = []
        for cls in np.unique(y_dense):
            members = np.flatnonzero(y_dense == cls)
            if members.size < 2:
                raise ValueError(
                    f"class {cls} has {members.size} item(s); need >= 2 to carve "
                    "a validation split (or pass X_val/y_val explicitly)"
                )
            take = int(round(self.validation_fraction * members.size))
            take = min(max(take, 1), members.size - 1)
            val_idx.append(rng.permutation(members)[:take])
        val_idx = np.sort(np.concatenate(val_idx))
        mask = np.zeros(n, dtype=bool)
        mask[val_idx] = True
        return np.flatnonzero(~mask), val_idx

    def fit(self, X, y, domain=None, X_val=None, y_val=None, domain_val=None,
            X_test=None, domain_test=None):
        """Train on (X, y, domain); test inputs join TCI training unlabeled."""
        X = check_spectra(X)
        n = X.shape[0]
        y = check_class_labels(y, n)
        if domain is None:
            raise ValueError(
                "domain labels are required: the model always trains a domain "
                "head over >= 2 collections"
            )
        domain = check_domain_labels(domain, n)

        self.classes_, y_dense = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")

        if (X_val is None) != (y_val is None):
            raise ValueError("pass X_val and y_val together")
        if X_val is not None:
            X_val = check_spectra(X_val, "X_val", planes=X.shape[1])
            y_val = check_class_labels(y_val, X_val.shape[0], "y_val")
            if not np.all(np.isin(y_val, self.classes_)):
                raise ValueError("y_val contains classes unseen in y")
            yv_dense = np.searchsorted(self.classes_, y_val)
            dv = (np.zeros(len(X_val), dtype=np.int64) if domain_val is None
                  else check_domain_labels(domain_val, X_val.shape[0], "domain_val"))
            train_set = SpectraSet(X, y_dense, domain)
            val_set = SpectraSet(X_val, yv_dense, dv)
        else:
            tr, va = self._carve_validation(n, y_dense)
            train_set = SpectraSet(X[tr], y_dense[tr], domain[tr])
            val_set = SpectraSet(X[va], y_dense[va], domain[va])

        if X_test is not None:
            X_test = check_spectra(X_test, "X_test", planes=X.shape[1])
            dt = (np.zeros(len(X_test), dtype=np.int64) if domain_test is None
                  else check_domain_labels(domain_test, X_test.shape[0], "domain_test"))
            # class labels of the test pool are never accepted, let alone read
            test_set = SpectraSet(
                X_test, np.zeros(len(X_test), dtype=np.int64), dt
            ).with_unknown_labels()
        elif self.mode == "TCI":
            raise ValueError("TCI mode needs X_test (and usually domain_test)")
        else:
            empty = np.empty((0,) + X.shape[1:], dtype=np.float64)
            test_set = SpectraSet(empty, np.empty(0, dtype=np.int64),
                                  np.empty(0, dtype=np.int64))

        cfg = self._train_config()
        split = SpectraSplit(train_set, val_set, test_set)
        model = model_for(split, cfg, feature_dim=self.feature_dim,
                          conv_channels=tuple(self.conv_channels),
                          hidden_dim=self.hidden_dim)
        self.result_ = train(model, split, cfg)
        self.model_ = self.result_.best_model
        self.domains_ = model.config.domain_ids
        self.n_epochs_ = len(self.result_.metrics)
        return self

    def _probs(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_spectra(X, planes=self.model_.config.input_shape[0])
        label_p, _ = _forward_probs(self.model_, X)
        return label_p

    def predict(self, X) -> np.ndarray:
        label_p = self._probs(X)
        return self.classes_[predict_label(label_p)]

    def predict_proba(self, X) -> np.ndarray:
        """Known-class probabilities renormalized over classes_ (the unknown
        head output is excluded; it is near zero for any trained model)."""
        label_p = self._probs(X)[:, :-1]
        return label_p / label_p.sum(axis=1, keepdims=True)
