"""Dataset CSV ingestion, binarization of label distributions, synthetic data."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import row_softmax

SIMPLEX_TOL = 1e-6


class DataError(ValueError):
    """Malformed or invalid dataset content.  ``row`` is the 1-based data row, if known."""

    def __init__(self, message: str, row: int | None = None, path=None):
        self.row = row
        self.path = path
        where = f"{path}: " if path else ""
        where += f"row {row}: " if row is not None else ""
        super().__init__(where + message)


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    D: np.ndarray | None = None
    L: np.ndarray | None = None
    label_names: list[str] = field(default_factory=list)
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        n, q = self.X.shape
        c = None
        for attr in ("D", "L"):
            arr = getattr(self, attr)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            setattr(self, attr, arr)
            if arr.shape[0] != n:
                raise DataError(f"{attr} has {arr.shape[0]} rows, X has {n}")
            if c is not None and arr.shape[1] != c:
                raise DataError(f"D and L disagree on label count ({c} vs {arr.shape[1]})")
            c = arr.shape[1]
        if self.D is not None:
            validate_distributions(self.D)
        if self.L is not None:
            validate_logical(self.L)
        if not self.label_names and c is not None:
            self.label_names = [f"y{j}" for j in range(c)]
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(q)]
        if c is not None and len(self.label_names) != c:
            raise DataError(f"{len(self.label_names)} label names for {c} labels")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_labels(self) -> int:
        return len(self.label_names)


def validate_distributions(D: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if not np.all(np.isfinite(D)):
        raise DataError("non-finite distribution entries")
    for i, row in enumerate(D):
        if np.any(row < 0):
            raise DataError("negative description degree", row=i + 1)
        if abs(row.sum() - 1.0) > tol:
            raise DataError(f"distribution sums to {row.sum():.6g}, not 1", row=i + 1)


def validate_logical(L: np.ndarray) -> None:
    if not np.all((L == 0) | (L == 1)):
        raise DataError("logical labels must be 0 or 1")
    empty = np.flatnonzero(L.sum(axis=1) == 0)
    if empty.size:
        raise DataError("instance has no relevant label", row=int(empty[0]) + 1)


def standardize(X: np.ndarray) -> np.ndarray:
    """Column z-scores; constant columns become 0."""
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    out = np.zeros_like(X)
    ok = std > 0
    out[:, ok] = (X[:, ok] - mean[ok]) / std[ok]
    return out


def load_dataset(path, standardize_features: bool = True, name: str | None = None) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", path=path) from None
        header = [h.strip() for h in header]
        cols = {p: [(i, h[2:]) for i, h in enumerate(header) if h.startswith(p)] for p in ("f:", "d:", "l:")}
        if not cols["f:"]:
            raise DataError("no feature columns (f:<name>)", path=path)
        if not cols["d:"] and not cols["l:"]:
            raise DataError("need d:<label> or l:<label> columns", path=path)
        if cols["d:"] and cols["l:"] and [n for _, n in cols["d:"]] != [n for _, n in cols["l:"]]:
            raise DataError("d: and l: columns name different labels", path=path)
        rows = []
        for lineno, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"expected {len(header)} cells, found {len(rec)}", row=lineno, path=path)
            try:
                rows.append([float(c) for c in rec])
            except ValueError:
                bad = next(c for c in rec if not _is_float(c))
                raise DataError(f"non-numeric cell {bad!r}", row=lineno, path=path) from None
    if not rows:
        raise DataError("no data rows", path=path)
    table = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(table)):
        r = int(np.flatnonzero(~np.isfinite(table).all(axis=1))[0]) + 1
        raise DataError("non-finite cell", row=r, path=path)

    def block(prefix):
        idx = [i for i, _ in cols[prefix]]
        return table[:, idx] if idx else None

    X = block("f:")
    D, L = block("d:"), block("l:")
    try:
        if D is not None:
            validate_distributions(D)
        if L is not None:
            validate_logical(L)
    except DataError as err:
        raise DataError(str(err), row=err.row, path=path) from None
    label_names = [n for _, n in (cols["d:"] or cols["l:"])]
    return Dataset(
        name=name or path.stem,
        X=standardize(X) if standardize_features else X,
        D=D,
        L=L,
        label_names=label_names,
        feature_names=[n for _, n in cols["f:"]],
    )


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(ds: Dataset, path) -> None:
    """Write the CSV layout that ``load_dataset`` reads; floats are written round-trip exact."""
    header = [f"f:{n}" for n in ds.feature_names]
    blocks = [ds.X]
    if ds.D is not None:
        header += [f"d:{n}" for n in ds.label_names]
        blocks.append(ds.D)
    if ds.L is not None:
        header += [f"l:{n}" for n in ds.label_names]
        blocks.append(ds.L)
    table = np.hstack(blocks)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([_fmt(v) for v in row])


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- binarization -------------------------------------------------------------


@dataclass(frozen=True)
class BinarizeStrategy:
    kind: str = "mean-threshold"  # mean-threshold | top-k | fixed-threshold
    k: int | None = None
    theta: float | None = None

    @classmethod
    def parse(cls, text: str) -> "BinarizeStrategy":
        """``mean-threshold``, ``top-k:2`` or ``fixed-threshold:0.3``."""
        kind, _, arg = text.partition(":")
        if kind == "top-k":
            return cls(kind, k=int(arg))
        if kind == "fixed-threshold":
            return cls(kind, theta=float(arg))
        if kind == "mean-threshold" and not arg:
            return cls(kind)
        raise ValueError(f"unknown binarization strategy {text!r}")

    def __str__(self):
        if self.kind == "top-k":
            return f"top-k:{self.k}"
        if self.kind == "fixed-threshold":
            return f"fixed-threshold:{self.theta}"
        return self.kind


def binarize(D, strategy: BinarizeStrategy | str = BinarizeStrategy()) -> np.ndarray:
    if isinstance(strategy, str):
        strategy = BinarizeStrategy.parse(strategy)
    D = np.asarray(D, dtype=np.float64)
    n, c = D.shape
    if strategy.kind == "mean-threshold":
        L = D > 1.0 / c
    elif strategy.kind == "top-k":
        k = strategy.k
        if k is None or not 1 <= k <= c:
            raise ValueError(f"top-k needs 1 <= k <= {c}, got {k}")
        # stable sort on -d keeps the lower label index first among ties
        order = np.argsort(-D, axis=1, kind="stable")[:, :k]
        L = np.zeros((n, c), dtype=bool)
        np.put_along_axis(L, order, True, axis=1)
    elif strategy.kind == "fixed-threshold":
        theta = strategy.theta
        if theta is None or not 0 < theta < 1:
            raise ValueError(f"fixed-threshold needs theta in (0, 1), got {theta}")
        L = D > theta
    else:
        raise ValueError(f"unknown binarization strategy {strategy.kind!r}")
    L = L.astype(np.float64)
    empty = L.sum(axis=1) == 0
    L[empty, np.argmax(D[empty], axis=1)] = 1.0
    return L


def normalize_logical(L: np.ndarray) -> np.ndarray:
    """Spread each row's mass uniformly over its relevant labels."""
    return L / L.sum(axis=1, keepdims=True)


def generate_synthetic(n: int, q: int, c: int, seed: int = 0, weight_scale: float = 1.0,
                       W=None, b=None, strategy: BinarizeStrategy | str | None = "mean-threshold") -> Dataset:
    """Features uniform on [-1, 1]^q, distributions softmax(X W + b) with Gaussian W, b.

    Logical labels come from ``binarize`` unless ``strategy`` is None.
    """
    if min(n, q, c) < 2:
        raise ValueError("n, q and c must all be at least 2")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, q))
    if W is None:
        W = weight_scale * rng.standard_normal((q, c))
    if b is None:
        b = weight_scale * rng.standard_normal((1, c))
    D = row_softmax(X @ np.asarray(W, dtype=np.float64) + np.asarray(b, dtype=np.float64).reshape(1, c))
    L = binarize(D, strategy) if strategy is not None else None
    return Dataset(name=f"synthetic-{seed}", X=X, D=D, L=L)
