"""The six label-distribution recovery measures and average-rank aggregation."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import DataError, validate_distributions

CLAMP = 1e-12
METRIC_NAMES = ("chebyshev", "clark", "canberra", "kullback_leibler", "cosine", "intersection")
# True where larger is better
HIGHER_IS_BETTER = {
    "chebyshev": False,
    "clark": False,
    "canberra": False,
    "kullback_leibler": False,
    "cosine": True,
    "intersection": True,
}


@dataclass
class EvalReport:
    chebyshev: float
    clark: float
    canberra: float
    kullback_leibler: float
    cosine: float
    intersection: float
    n_instances: int

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, m) for m in METRIC_NAMES)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{k: d[k] for k in (*METRIC_NAMES, "n_instances")})


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 -> 0 (both entries zero)
    out = np.zeros_like(num)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def per_instance(D_true, D_pred) -> dict[str, np.ndarray]:
    d = np.asarray(D_true, dtype=np.float64)
    p = np.asarray(D_pred, dtype=np.float64)
    pc = np.maximum(p, CLAMP)  # only for KL and the Clark/Canberra denominators
    diff = np.abs(d - p)
    s = d + pc
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_terms = np.where(d > 0, d * np.log(np.where(d > 0, d, 1.0) / pc), 0.0)
    return {
        "chebyshev": diff.max(axis=1),
        "clark": np.sqrt(_ratio(diff**2, s**2).sum(axis=1)),
        "canberra": _ratio(diff, s).sum(axis=1),
        "kullback_leibler": kl_terms.sum(axis=1),
        "cosine": (d * p).sum(axis=1) / (np.linalg.norm(d, axis=1) * np.linalg.norm(p, axis=1)),
        "intersection": np.minimum(d, p).sum(axis=1),
    }


def evaluate(D_true, D_pred) -> EvalReport:
    D_true = np.asarray(D_true, dtype=np.float64)
    D_pred = np.asarray(D_pred, dtype=np.float64)
    if D_true.shape != D_pred.shape or D_true.ndim != 2:
        raise DataError(f"shape mismatch: truth {D_true.shape} vs prediction {D_pred.shape}")
    for what, arr in (("truth", D_true), ("prediction", D_pred)):
        try:
            validate_distributions(arr)
        except DataError as err:
            raise DataError(f"{what}: {err}", row=err.row) from None
    scores = per_instance(D_true, D_pred)
    return EvalReport(**{m: float(np.mean(scores[m])) for m in METRIC_NAMES}, n_instances=len(D_true))


def average_rank(scores, higher_is_better: bool = False) -> np.ndarray:
    """Mean rank per method over datasets; ``scores`` is methods x datasets, best rank is 1, ties share the mean rank."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.any(np.isnan(scores)):
        raise ValueError("scores contain missing cells")
    keyed = -scores if higher_is_better else scores
    ranks = np.empty_like(keyed)
    for j in range(keyed.shape[1]):
        col = keyed[:, j]
        for i, v in enumerate(col):
            below = np.sum(col < v)
            ties = np.sum(col == v)
            ranks[i, j] = below + (ties + 1) / 2.0
    return ranks.mean(axis=1)


CSV_FIELDS = ("dataset", "method", *METRIC_NAMES)


def append_csv_row(path, dataset: str, method: str, report: EvalReport) -> None:
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(CSV_FIELDS)
        w.writerow([dataset, method, *(repr(v) for v in report.values())])
