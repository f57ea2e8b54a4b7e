"""Labeled spectrogram datasets and their on-disk format.

A SpectraSet bundles the network inputs (n, 3, F, T) with integer class labels
(-1 marks the Unknown target used by test-conditioned training) and integer
domain labels. Files carry the magic "EMSPEC01"; all integers little-endian,
values float64 plane-major, class stored as u8 with 255 meaning Unknown.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

UNKNOWN_CLASS = -1
_UNKNOWN_BYTE = 255
MAGIC = b"EMSPEC01"


@dataclass
class SpectraSet:
    X: np.ndarray  # (n, planes, F, T) float64 in [0, 1]
    y: np.ndarray  # (n,) int64, UNKNOWN_CLASS for unlabeled items
    domain: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        self.domain = np.ascontiguousarray(self.domain, dtype=np.int64)
        if self.X.ndim != 4:
            raise ValueError(f"X must be (n, planes, F, T), got shape {self.X.shape}")
        n = self.X.shape[0]
        if self.y.shape != (n,) or self.domain.shape != (n,):
            raise ValueError(
                f"label shapes {self.y.shape}/{self.domain.shape} do not match {n} items"
            )

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx) -> "SpectraSet":
        idx = np.asarray(idx)
        return SpectraSet(self.X[idx], self.y[idx], self.domain[idx])

    def with_unknown_labels(self) -> "SpectraSet":
        """Copy with every class label replaced by the Unknown marker."""
        return SpectraSet(self.X, np.full(len(self), UNKNOWN_CLASS), self.domain)


def concat(sets) -> SpectraSet:
    sets = list(sets)
    return SpectraSet(
        np.concatenate([s.X for s in sets]),
        np.concatenate([s.y for s in sets]),
        np.concatenate([s.domain for s in sets]),
    )


def write_spectra(path, ds: SpectraSet):
    if np.any((ds.y < 0) & (ds.y != UNKNOWN_CLASS)) or np.any(ds.y > 254):
        raise ValueError("class labels must be in [0, 254] or UNKNOWN_CLASS")
    if np.any(ds.domain < 0) or np.any(ds.domain > 0xFFFF):
        raise ValueError("domain labels must fit in u16")
    n, planes, F, T = ds.X.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", n, planes, F, T))
        for i in range(n):
            fh.write(ds.X[i].astype("<f8").tobytes())
            cls = _UNKNOWN_BYTE if ds.y[i] == UNKNOWN_CLASS else int(ds.y[i])
            fh.write(struct.pack("<BH", cls, int(ds.domain[i])))


def read_spectra(path) -> SpectraSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: bad magic, not an EMSPEC01 file")
    n, planes, F, T = struct.unpack_from("<IIII", blob, len(MAGIC))
    item_bytes = planes * F * T * 8 + 3
    expect = len(MAGIC) + 16 + n * item_bytes
    if len(blob) != expect:
        raise ValueError(f"{path}: expected {expect} bytes, found {len(blob)}")
    X = np.empty((n, planes, F, T), dtype=np.float64)
    y = np.empty(n, dtype=np.int64)
    dom = np.empty(n, dtype=np.int64)
    off = len(MAGIC) + 16
    for i in range(n):
        X[i] = np.frombuffer(
            blob, dtype="<f8", count=planes * F * T, offset=off
        ).reshape(planes, F, T)
        off += planes * F * T * 8
        cls, d = struct.unpack_from("<BH", blob, off)
        off += 3
        y[i] = UNKNOWN_CLASS if cls == _UNKNOWN_BYTE else cls
        dom[i] = d
    return SpectraSet(X, y, dom)
