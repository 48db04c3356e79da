"""Sparse 3rd-order tensors in coordinate (COO) form.

A :class:`SparseTensor3` only stores the observed entries: an ``(n, 3)``
integer index array and a length-``n`` value array. Instances are frozen
and their arrays are marked read-only, so they can be shared freely.

The text format read by :func:`load_coo` and written by :func:`save_coo`::

    # comment lines start with '#'
    d1 d2 d3
    i j k value
    ...

Indices are 0-based.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (BoundsError, DuplicateError, EmptyInputError, ParseError,
                     SplitError, UsageError)

__all__ = [
    "SparseTensor3", "Standardizer", "SplitSpec",
    "load_coo", "save_coo", "sparsity", "standardize", "split",
]


def _linear_index(indices, dims):
    return np.ravel_multi_index(indices.T, dims) if len(indices) else np.zeros(0, np.int64)


@dataclass(frozen=True)
class SparseTensor3:
    """Observed entries of a ``d1 x d2 x d3`` tensor.

    Parameters
    ----------
    dims : tuple of int
        Extents ``(d1, d2, d3)``.
    indices : ndarray, shape (n, 3)
        0-based coordinates of the observed entries.
    values : ndarray, shape (n,)
        Observed values.
    name : str
        Free-form identifier, carried into reports.
    """

    dims: tuple
    indices: np.ndarray
    values: np.ndarray
    name: str = "X"
    _check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise UsageError(f"dims must be three positive extents, got {self.dims}")
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(idx) != len(vals):
            raise UsageError(f"{len(idx)} index triples but {len(vals)} values")
        if self._check:
            _validate(idx, dims)
        idx = idx.copy()
        vals = vals.copy()
        idx.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_entries(cls, dims, entries: Iterable[Sequence], name="X"):
        """Build from an iterable of ``(i, j, k, value)`` tuples."""
        entries = list(entries)
        if not entries:
            return cls(dims, np.zeros((0, 3), np.int64), np.zeros(0), name)
        arr = np.asarray(entries, dtype=np.float64)
        return cls(dims, arr[:, :3].astype(np.int64), arr[:, 3], name)

    @classmethod
    def from_dense(cls, dense, name="X"):
        """All cells of a dense array, in C order."""
        dense = np.asarray(dense, dtype=np.float64)
        idx = np.indices(dense.shape).reshape(3, -1).T
        return cls(dense.shape, idx, dense.reshape(-1), name)

    def __len__(self):
        return len(self.values)

    @property
    def n_cells(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    def entries(self):
        """List of ``(i, j, k, value)`` tuples."""
        return [(int(i), int(j), int(k), float(v))
                for (i, j, k), v in zip(self.indices, self.values)]

    def subset(self, positions, name=None):
        """Entries at the given row positions, in that order."""
        positions = np.asarray(positions, dtype=np.int64)
        return SparseTensor3(self.dims, self.indices[positions], self.values[positions],
                             self.name if name is None else name, _check=False)

    def with_values(self, values, name=None):
        return SparseTensor3(self.dims, self.indices, values,
                             self.name if name is None else name, _check=False)

    def linear_index(self):
        return _linear_index(self.indices, self.dims)

    def to_dense(self, fill=np.nan):
        if self.n_cells > 10**7:
            raise UsageError("refusing to densify a tensor with more than 1e7 cells")
        out = np.full(self.dims, fill, dtype=np.float64)
        out[tuple(self.indices.T)] = self.values
        return out


def _validate(idx, dims):
    if len(idx) == 0:
        return
    bad = (idx < 0) | (idx >= np.asarray(dims))
    if bad.any():
        row, axis = np.argwhere(bad)[0]
        raise BoundsError(f"index {idx[row, axis]} out of range for mode {axis + 1} "
                          f"with extent {dims[axis]} (entry {row})")
    lin = _linear_index(idx, dims)
    uniq, first, counts = np.unique(lin, return_index=True, return_counts=True)
    if len(uniq) != len(lin):
        dup = uniq[counts > 1][0]
        raise DuplicateError(f"duplicate index triple {np.unravel_index(dup, dims)}")


def load_coo(path, name=None) -> SparseTensor3:
    """Read a COO text file.

    Raises
    ------
    ParseError
        Malformed header or entry line; the message carries the line number.
    BoundsError
        An index outside the declared extents.
    DuplicateError
        The same triple appears twice.
    """
    path = Path(path)
    dims = None
    rows, vals, lines = [], [], []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if dims is None:
                if len(parts) != 3:
                    raise ParseError(f"expected header 'd1 d2 d3', got {line!r}", lineno)
                try:
                    dims = tuple(int(p) for p in parts)
                except ValueError:
                    raise ParseError(f"non-integer extent in {line!r}", lineno) from None
                if min(dims) <= 0:
                    raise ParseError(f"extents must be positive, got {dims}", lineno)
                continue
            if len(parts) != 4:
                raise ParseError(f"expected 'i j k value', got {line!r}", lineno)
            try:
                ijk = (int(parts[0]), int(parts[1]), int(parts[2]))
                v = float(parts[3])
            except ValueError:
                raise ParseError(f"cannot parse entry {line!r}", lineno) from None
            for axis, (x, d) in enumerate(zip(ijk, dims)):
                if not 0 <= x < d:
                    raise BoundsError(f"line {lineno}: index {x} out of range for mode "
                                      f"{axis + 1} with extent {d}")
            rows.append(ijk)
            vals.append(v)
            lines.append(lineno)
    if dims is None:
        raise ParseError("missing header line", None)
    idx = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    lin = _linear_index(idx, dims)
    order = np.argsort(lin, kind="stable")
    dup = np.nonzero(np.diff(lin[order]) == 0)[0]
    if len(dup):
        second = order[dup[0] + 1]
        raise DuplicateError(f"line {lines[second]}: duplicate index triple {rows[second]}")
    return SparseTensor3(dims, idx, vals, name or path.stem, _check=False)


def save_coo(t: SparseTensor3, path, comment=None):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if comment:
            for line in str(comment).splitlines():
                fh.write(f"# {line}\n")
        fh.write("{} {} {}\n".format(*t.dims))
        for (i, j, k), v in zip(t.indices, t.values):
            fh.write(f"{i} {j} {k} {float(v)!r}\n")


def sparsity(t: SparseTensor3) -> float:
    """Fraction of unobserved cells, ``1 - n_observed / (d1 d2 d3)``."""
    return 1.0 - len(t) / t.n_cells


@dataclass(frozen=True)
class Standardizer:
    """Affine map ``v -> (v - mean) / std`` fitted on one tensor's values."""

    mean: float = 0.0
    std: float = 1.0
    applied: bool = True
    degenerate: bool = False

    def __post_init__(self):
        if not self.std > 0:
            raise UsageError(f"std must be positive, got {self.std}")

    def transform(self, v):
        v = np.asarray(v, dtype=np.float64)
        if not self.applied:
            return v.copy()
        return (v - self.mean) / self.std

    def inverse_transform(self, v):
        v = np.asarray(v, dtype=np.float64)
        if not self.applied:
            return v.copy()
        return v * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "applied": self.applied,
                "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["mean"]), float(d["std"]), bool(d["applied"]),
                   bool(d.get("degenerate", False)))


def standardize(t: SparseTensor3):
    """Shift and scale observed values to zero mean and unit population std.

    Returns
    -------
    (SparseTensor3, Standardizer)
        A constant tensor maps to all zeros; its standardizer records
        ``std == 1`` and ``degenerate=True``.
    """
    if len(t) == 0:
        raise EmptyInputError(f"cannot standardize empty tensor {t.name!r}")
    mean = float(np.mean(t.values))
    std = float(np.std(t.values))
    degenerate = not std > 0 or std <= 1e-300
    if degenerate:
        std = 1.0
    s = Standardizer(mean, std, True, degenerate)
    return t.with_values(s.transform(t.values)), s


@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test fractions plus the permutation seed."""

    train_frac: float = 0.72
    val_frac: float = 0.08
    test_frac: float = 0.20
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise UsageError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-12:
            raise UsageError(f"split fractions must sum to 1, got {sum(fracs)!r}")
        if int(self.seed) < 0:
            raise UsageError("seed must be non-negative")

    @classmethod
    def parse(cls, text, seed=0):
        """From a string such as ``"0.72,0.08,0.20"``."""
        parts = [float(p) for p in str(text).replace(" ", "").split(",") if p]
        if len(parts) != 3:
            raise UsageError(f"--split needs three comma-separated fractions, got {text!r}")
        return cls(*parts, seed=seed)

    def counts(self, n):
        """Largest-remainder allocation of ``n`` items to the three parts."""
        exact = np.array([self.train_frac, self.val_frac, self.test_frac]) * n
        base = np.floor(exact + 1e-9).astype(np.int64)
        rem = exact - base
        short = n - int(base.sum())
        # ties break toward the earlier part
        for pos in np.argsort(-rem, kind="stable")[:max(short, 0)]:
            base[pos] += 1
        return tuple(int(c) for c in base)


def split(t: SparseTensor3, s: SplitSpec):
    """Randomly partition the observed entries into train, validation and test.

    Raises
    ------
    SplitError
        When rounding leaves any part empty.
    """
    n = len(t)
    if n == 0:
        raise EmptyInputError(f"cannot split empty tensor {t.name!r}")
    n_train, n_val, n_test = s.counts(n)
    if min(n_train, n_val, n_test) == 0:
        raise SplitError(f"{n} entries split as {n_train}/{n_val}/{n_test}: a part is empty")
    perm = np.random.default_rng(int(s.seed)).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    names = ("train", "val", "test")
    return tuple(t.subset(np.sort(p), name=f"{t.name}.{nm}") for p, nm in zip(parts, names))
