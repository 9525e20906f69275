"""Adam training loop for the LIB / LIB_GAP objectives and the alpha-beta grid search."""
from __future__ import annotations

import csv
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Tape, backward
from .data import Dataset
from .metrics import EvalReport, evaluate
from .model import (
    LIB,
    LIB_GAP,
    LossBreakdown,
    LossError,
    ModelParams,
    build_lib_gap_graph,
    build_lib_graph,
    draw_epsilon,
    init_params,
    recover_all,
)

log = logging.getLogger(__name__)

DEFAULT_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)
FULL = "FULL"


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    latent_dim: int = 256
    hidden_dim: int = 64
    epochs: int = 150
    learning_rate: float = 1e-3
    batch: int | str = FULL
    seed: int = 0
    mc_samples: int = 1
    objective: str = LIB

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        for name in ("latent_dim", "hidden_dim", "epochs", "mc_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch != FULL and (not isinstance(self.batch, int) or self.batch < 1):
            raise ValueError(f"batch must be a positive count or {FULL!r}")
        if self.objective not in (LIB, LIB_GAP):
            raise ValueError(f"objective must be {LIB} or {LIB_GAP}")
        if self.alpha > 10 or self.beta > 10:
            warnings.warn("alpha/beta outside the usual [0, 10] search range", stacklevel=3)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    records: list[LossBreakdown] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    aborted_at: int | None = None
    params: ModelParams | None = None

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "total", "assignment", "gap", "kl", "seconds"])
            for i, (r, s) in enumerate(zip(self.records, self.seconds), start=1):
                w.writerow([i, repr(r.total), repr(r.assignment_term), repr(r.gap_term), repr(r.kl_term), f"{s:.6f}"])


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, history: TrainHistory, cause: Exception):
        self.epoch = epoch
        self.history = history
        super().__init__(f"training aborted at epoch {epoch}: {cause}")


class Adam:
    def __init__(self, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _seeds(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(noise_ss)


def _step_loss(params: ModelParams, X, L, config: TrainConfig, noise: np.random.Generator):
    tape = Tape()
    p = {k: tape.parameter(k, v) for k, v in params.blocks.items()}
    if config.objective == LIB:
        eps = draw_epsilon(noise, len(X), config.latent_dim, config.mc_samples)
        ids = build_lib_graph(tape, p, X, L, eps, config.alpha, config.beta)
        v = {k: float(tape.value(ids[k])[0, 0]) for k in ("total", "assignment", "gap", "kl")}
        rec = LossBreakdown(v["total"], v["assignment"], v["gap"], v["kl"], config.alpha, config.beta)
        return rec, backward(tape, ids["total"])
    node = build_lib_gap_graph(tape, p, X, L)
    value = float(tape.value(node)[0, 0])
    # ablation objective has no assignment or KL part
    return LossBreakdown(value, 0.0, value, 0.0, 1.0, 0.0), backward(tape, node)


def _mean_breakdown(recs: list[LossBreakdown], sizes: list[int]) -> LossBreakdown:
    if len(recs) == 1:
        return recs[0]
    w = np.asarray(sizes, dtype=np.float64) / sum(sizes)
    avg = lambda attr: float(sum(wi * getattr(r, attr) for wi, r in zip(w, recs)))
    return LossBreakdown(avg("total"), avg("assignment_term"), avg("gap_term"), avg("kl_term"),
                         recs[0].alpha, recs[0].beta)


def train(X, L, config: TrainConfig, params: ModelParams | None = None,
          callback=None) -> tuple[ModelParams, TrainHistory]:
    """Fit the model to features X and logical labels L.

    Ground-truth distributions are deliberately not an argument.  Each epoch's
    record is the loss evaluated before that epoch's update(s); fresh noise is
    drawn for every step.  ``callback(epoch, params)`` runs after each epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if X.ndim != 2 or L.ndim != 2 or len(X) != len(L):
        raise ValueError(f"X {X.shape} and L {L.shape} must be 2-D with equal row counts")
    init_rng, noise = _seeds(config.seed)
    if params is None:
        params = init_params(X.shape[1], L.shape[1], config.latent_dim, config.hidden_dim,
                             seed=init_rng, objective=config.objective)
    else:
        params = params.copy()
    opt = Adam(lr=config.learning_rate)
    history = TrainHistory(params=params)
    n = len(X)
    batch = n if config.batch == FULL else min(int(config.batch), n)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        if batch == n:
            batches = [np.arange(n)]
        else:
            order = noise.permutation(n)
            batches = [order[i:i + batch] for i in range(0, n, batch)]
        recs, sizes = [], []
        for idx in batches:
            try:
                rec, grads = _step_loss(params, X[idx], L[idx], config, noise)
            except (LossError, NonFiniteError) as err:
                history.aborted_at = epoch
                raise TrainingAborted(epoch, history, err) from err
            opt.step(params.blocks, grads)
            recs.append(rec)
            sizes.append(len(idx))
        history.records.append(_mean_breakdown(recs, sizes))
        history.seconds.append(time.perf_counter() - start)
        if not all(np.all(np.isfinite(v)) for v in params.blocks.values()):
            history.aborted_at = epoch
            raise TrainingAborted(epoch, history, FloatingPointError("non-finite parameters"))
        if callback is not None:
            callback(epoch, params)
        if epoch == 1 or epoch % 50 == 0:
            log.debug("epoch %d total %.6f", epoch, history.records[-1].total)
    return params, history


# -- grid search --------------------------------------------------------------


@dataclass
class GridCell:
    alpha: float
    beta: float
    seed: int
    report: EvalReport | None = None
    status: str = "ok"
    error: str = ""


@dataclass
class GridResult:
    cells: list[GridCell]
    best: GridCell | None


def _best_key(cell: GridCell):
    r = cell.report
    return (r.chebyshev, -r.intersection, cell.alpha, cell.beta)


def _run_cell(ds: Dataset, config: TrainConfig) -> EvalReport:
    params, _ = train(ds.X, ds.L, config)
    return evaluate(ds.D, recover_all(params, ds.X))


def _cell_task(args):
    ds, cfg = args
    try:
        return _run_cell(ds, cfg), None
    except Exception as err:  # recorded per cell; the grid keeps going
        return None, f"{type(err).__name__}: {err}"


def grid_search(dataset: Dataset, alphas, betas, config_base: TrainConfig, workers: int = 1) -> GridResult:
    """Train one model per (alpha, beta) and score its recovery against dataset.D.

    Cell k (row-major over alphas, then betas) trains with seed ``config_base.seed + k``.
    Best cell: lowest Chebyshev, then highest Intersection, then smaller alpha, smaller beta.
    """
    if dataset.D is None or dataset.L is None:
        raise ValueError("grid search needs both ground-truth D and logical labels L")
    cells, tasks = [], []
    for k, (a, b) in enumerate((a, b) for a in alphas for b in betas):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cfg = replace(config_base, alpha=float(a), beta=float(b), seed=config_base.seed + k)
        cells.append(GridCell(float(a), float(b), cfg.seed))
        tasks.append((dataset, cfg))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_cell_task, tasks))
    else:
        outcomes = [_cell_task(t) for t in tasks]
    for cell, (report, err) in zip(cells, outcomes):
        if err is None:
            cell.report = report
        else:
            cell.status, cell.error = "failed", err
            log.warning("cell alpha=%g beta=%g failed: %s", cell.alpha, cell.beta, err)
    ok = [c for c in cells if c.report is not None]
    return GridResult(cells, min(ok, key=_best_key) if ok else None)
