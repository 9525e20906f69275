"""Encoder, label heads and the two training objectives.

Four heads share one parameter dictionary:

* ``enc``  -- x -> sigmoid -> sigmoid, then linear ``enc_mu`` and softplus ``enc_sigma``
  heads giving the Gaussian posterior over the latent code h;
* ``dec``  -- h -> mean of the logical-label likelihood (linear output);
* ``gap``  -- h -> per-label standard deviation of the label gap (softplus output);
* ``ld``   -- h -> recovered label distribution (row softmax output).

Each stack is three dense layers with sigmoid between them.  The ablation
model (``LIB_GAP``) keeps only ``gap`` and ``ld``, fed with x directly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Tape, backward

SIGMA_FLOOR = 1e-6
CHECKPOINT_FORMAT = 1

LIB = "LIB"
LIB_GAP = "LIB_GAP"


class LossError(FloatingPointError):
    """A loss term evaluated to NaN/Inf."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"non-finite value in {term} term" + (f" ({detail})" if detail else ""))


@dataclass
class ModelParams:
    blocks: dict[str, np.ndarray]
    input_dim: int
    n_labels: int
    latent_dim: int
    hidden_dim: int
    objective: str = LIB

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.blocks.items()},
            self.input_dim, self.n_labels, self.latent_dim, self.hidden_dim, self.objective,
        )

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Blocks belonging to one head, e.g. ``group("gap")``."""
        return {k: v for k, v in self.blocks.items() if k.split(".")[0] == prefix}


@dataclass
class LatentBatch:
    mu: np.ndarray
    sigma: np.ndarray
    epsilon: np.ndarray
    h: np.ndarray


@dataclass
class LossBreakdown:
    total: float
    assignment_term: float
    gap_term: float
    kl_term: float
    alpha: float
    beta: float


def _layer_shapes(objective, input_dim, n_labels, latent_dim, hidden_dim):
    hd = hidden_dim
    shapes = {}

    def stack(prefix, fan_in, fan_out):
        dims = [fan_in, hd, hd, fan_out]
        for i in range(3):
            shapes[f"{prefix}.W{i}"] = (dims[i], dims[i + 1])
            shapes[f"{prefix}.b{i}"] = (1, dims[i + 1])

    if objective == LIB:
        for i, (a, b) in enumerate([(input_dim, hd), (hd, hd)]):
            shapes[f"enc.W{i}"] = (a, b)
            shapes[f"enc.b{i}"] = (1, b)
        shapes["enc.Wmu"] = (hd, latent_dim)
        shapes["enc.bmu"] = (1, latent_dim)
        shapes["enc.Wsigma"] = (hd, latent_dim)
        shapes["enc.bsigma"] = (1, latent_dim)
        stack("dec", latent_dim, n_labels)
        stack("gap", latent_dim, n_labels)
        stack("ld", latent_dim, n_labels)
    elif objective == LIB_GAP:
        stack("gap", input_dim, n_labels)
        stack("ld", input_dim, n_labels)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return shapes


def init_params(input_dim, n_labels, latent_dim=256, hidden_dim=64, seed=0, objective=LIB) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, shape in _layer_shapes(objective, input_dim, n_labels, latent_dim, hidden_dim).items():
        if ".b" in name:
            blocks[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            blocks[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(blocks, input_dim, n_labels, latent_dim, hidden_dim, objective)


def zero_params(input_dim, n_labels, latent_dim=256, hidden_dim=64, objective=LIB) -> ModelParams:
    shapes = _layer_shapes(objective, input_dim, n_labels, latent_dim, hidden_dim)
    return ModelParams({k: np.zeros(s) for k, s in shapes.items()},
                       input_dim, n_labels, latent_dim, hidden_dim, objective)


# -- graph construction -------------------------------------------------------


def _dense(tape: Tape, p: dict[str, int], w: str, b: str, x: int, ones: int) -> int:
    return tape.add(tape.matmul(x, p[w]), tape.matmul(ones, p[b]))


def _positive(tape: Tape, z: int) -> int:
    return tape.add(tape.softplus(z), tape.constant(SIGMA_FLOOR))


def _head(tape: Tape, p, prefix: str, x: int, ones: int, output: str) -> int:
    a = tape.sigmoid(_dense(tape, p, f"{prefix}.W0", f"{prefix}.b0", x, ones))
    a = tape.sigmoid(_dense(tape, p, f"{prefix}.W1", f"{prefix}.b1", a, ones))
    z = _dense(tape, p, f"{prefix}.W2", f"{prefix}.b2", a, ones)
    if output == "linear":
        return z
    if output == "positive":
        return _positive(tape, z)
    return tape.softmax(z)


def _encoder(tape: Tape, p, x: int, ones: int) -> tuple[int, int]:
    a = tape.sigmoid(_dense(tape, p, "enc.W0", "enc.b0", x, ones))
    a = tape.sigmoid(_dense(tape, p, "enc.W1", "enc.b1", a, ones))
    mu = _dense(tape, p, "enc.Wmu", "enc.bmu", a, ones)
    sigma = _positive(tape, _dense(tape, p, "enc.Wsigma", "enc.bsigma", a, ones))
    return mu, sigma


def _check_rows(params: ModelParams, arr: np.ndarray, width: int, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"{what}: expected n x {width}, got shape {arr.shape}")
    return arr


def _tape_with(params: ModelParams, n: int) -> tuple[Tape, dict[str, int], int]:
    tape = Tape()
    p = {k: tape.parameter(k, v) for k, v in params.blocks.items()}
    return tape, p, tape.constant(np.ones((n, 1)))


def _require(params: ModelParams, objective: str, op: str):
    if params.objective != objective:
        raise ValueError(f"{op} needs {objective} parameters, got {params.objective}")


def encode(params: ModelParams, X) -> tuple[np.ndarray, np.ndarray]:
    _require(params, LIB, "encode")
    X = _check_rows(params, X, params.input_dim, "encode")
    tape, p, ones = _tape_with(params, len(X))
    mu, sigma = _encoder(tape, p, tape.constant(X), ones)
    return tape.value(mu), tape.value(sigma)


def sample_latent(mu, sigma, rng_seed=None, epsilon=None) -> LatentBatch:
    """Reparameterized draw ``h = mu + sigma * eps`` with eps ~ N(0, I)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != sigma.shape:
        raise ValueError(f"sample_latent: mu {mu.shape} vs sigma {sigma.shape}")
    if np.any(sigma <= 0):
        raise ValueError("sample_latent: sigma must be positive")
    if epsilon is None:
        epsilon = np.random.default_rng(rng_seed).standard_normal(mu.shape)
    elif epsilon.shape != mu.shape:
        raise ValueError(f"sample_latent: epsilon {epsilon.shape} vs mu {mu.shape}")
    return LatentBatch(mu, sigma, epsilon, mu + sigma * epsilon)


def _apply_head(params: ModelParams, h, prefix: str, output: str) -> np.ndarray:
    width = params.latent_dim if params.objective == LIB else params.input_dim
    h = _check_rows(params, h, width, prefix)
    tape, p, ones = _tape_with(params, len(h))
    return tape.value(_head(tape, p, prefix, tape.constant(h), ones, output))


def decode_logical(params: ModelParams, h) -> np.ndarray:
    _require(params, LIB, "decode_logical")
    return _apply_head(params, h, "dec", "linear")


def gap_sigma(params: ModelParams, h) -> np.ndarray:
    return _apply_head(params, h, "gap", "positive")


def recover_distribution(params: ModelParams, h) -> np.ndarray:
    return _apply_head(params, h, "ld", "softmax")


def recover_all(params: ModelParams, X) -> np.ndarray:
    """Deterministic recovery: the latent code is the posterior mean (eps = 0)."""
    if params.objective == LIB_GAP:
        return recover_distribution(params, X)
    mu, _ = encode(params, X)
    return recover_distribution(params, mu)


# -- objectives ---------------------------------------------------------------


class _TermGuard:
    """Re-raises tape non-finite failures as LossError tagged with the term being built."""

    def __init__(self):
        self.term = "forward"

    def __call__(self, term):
        self.term = term
        return self

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, NonFiniteError):
            raise LossError(self.term, str(exc)) from exc
        return False


def _gap_nll(tape: Tape, L: int, d_hat: int, sigma: int) -> int:
    """Sum over entries of 1/2 (l - d)^2 / sigma^2 + log sigma^2."""
    log_sigma = tape.log(sigma)
    inv_var = tape.exp(tape.scale(log_sigma, -2.0))
    quad = tape.mul(tape.square(tape.sub(L, d_hat)), inv_var)
    return tape.sum(tape.add(tape.scale(quad, 0.5), tape.scale(log_sigma, 2.0)))


def build_lib_graph(tape: Tape, p: dict[str, int], X: np.ndarray, L: np.ndarray,
                    epsilon: np.ndarray, alpha: float, beta: float) -> dict[str, int]:
    """Record the LIB objective on ``tape``; returns node ids of every term.

    ``epsilon`` has ``S * n`` rows for S Monte-Carlo draws per instance; X and L
    are tiled to match.  All three terms are per-instance means.
    """
    n = len(X)
    reps = len(epsilon) // n
    if reps * n != len(epsilon) or reps < 1:
        raise ValueError(f"epsilon rows {len(epsilon)} not a multiple of n={n}")
    guard = _TermGuard()
    with guard("kl"):
        ones = tape.constant(np.ones((n, 1)))
        mu, sigma = _encoder(tape, p, tape.constant(X), ones)
        kl = tape.scale(
            tape.add(
                tape.add(tape.sum(tape.square(mu)), tape.sum(tape.square(sigma))),
                tape.scale(tape.sum(tape.log(sigma)), -2.0),
            ),
            0.5 / n,
        )
    with guard("assignment"):
        Xs = np.tile(X, (reps, 1))
        Ls = tape.constant(np.tile(L, (reps, 1)))
        ones_s = ones if reps == 1 else tape.constant(np.ones((len(Xs), 1)))
        if reps > 1:
            mu_s, sigma_s = _encoder(tape, p, tape.constant(Xs), ones_s)
        else:
            mu_s, sigma_s = mu, sigma
        h = tape.add(mu_s, tape.mul(sigma_s, tape.constant(epsilon)))
        mu_l = _head(tape, p, "dec", h, ones_s, "linear")
        assignment = tape.scale(tape.sum(tape.square(tape.sub(mu_l, Ls))), 0.5 / len(Xs))
    with guard("gap"):
        d_hat = _head(tape, p, "ld", h, ones_s, "softmax")
        sig_d = _head(tape, p, "gap", h, ones_s, "positive")
        gap = tape.scale(_gap_nll(tape, Ls, d_hat, sig_d), 1.0 / len(Xs))
    with guard("total"):
        total = tape.add(
            tape.add(assignment, tape.scale(gap, alpha)),
            tape.scale(kl, beta),
        )
    return {"total": total, "assignment": assignment, "gap": gap, "kl": kl, "h": h, "d_hat": d_hat}


def build_lib_gap_graph(tape: Tape, p: dict[str, int], X: np.ndarray, L: np.ndarray) -> int:
    n = len(X)
    guard = _TermGuard()
    with guard("gap"):
        x = tape.constant(X)
        ones = tape.constant(np.ones((n, 1)))
        d_hat = _head(tape, p, "ld", x, ones, "softmax")
        sig_d = _head(tape, p, "gap", x, ones, "positive")
        log_sigma = tape.log(sig_d)
        inv_var = tape.exp(tape.scale(log_sigma, -2.0))
        quad = tape.mul(tape.square(tape.sub(tape.constant(L), d_hat)), inv_var)
        # 1/2 multiplies both the quadratic and the log-determinant here
        return tape.scale(tape.sum(tape.add(quad, tape.scale(log_sigma, 2.0))), 0.5 / n)


def _check_inputs(params: ModelParams, X, L):
    X = _check_rows(params, X, params.input_dim, "X")
    L = _check_rows(params, L, params.n_labels, "L")
    if len(X) != len(L):
        raise ValueError(f"X has {len(X)} rows but L has {len(L)}")
    if not np.all((L == 0) | (L == 1)):
        raise ValueError("L must contain only 0/1 entries")
    return X, L


def draw_epsilon(rng: np.random.Generator, n: int, latent_dim: int, mc_samples: int = 1) -> np.ndarray:
    return rng.standard_normal((n * mc_samples, latent_dim))


def loss_lib(params: ModelParams, X, L, rng_seed=0, alpha=1.0, beta=1.0, mc_samples=1,
             epsilon=None, with_grad=False):
    """Evaluate the LIB objective; optionally also return gradients by block name."""
    _require(params, LIB, "loss_lib")
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    X, L = _check_inputs(params, X, L)
    if epsilon is None:
        epsilon = draw_epsilon(np.random.default_rng(rng_seed), len(X), params.latent_dim, mc_samples)
    tape, p, _ = _tape_with(params, 0)
    ids = build_lib_graph(tape, p, X, L, epsilon, alpha, beta)
    v = {k: float(tape.value(i)[0, 0]) for k, i in ids.items() if k in ("total", "assignment", "gap", "kl")}
    out = LossBreakdown(v["total"], v["assignment"], v["gap"], v["kl"], float(alpha), float(beta))
    if with_grad:
        return out, backward(tape, ids["total"])
    return out


def loss_lib_gap(params: ModelParams, X, L, alpha_unused=None, with_grad=False):
    _require(params, LIB_GAP, "loss_lib_gap")
    X, L = _check_inputs(params, X, L)
    tape, p, _ = _tape_with(params, 0)
    node = build_lib_gap_graph(tape, p, X, L)
    value = float(tape.value(node)[0, 0])
    if with_grad:
        return value, backward(tape, node)
    return value


def gaussian_kl_term(mu: np.ndarray, sigma: np.ndarray) -> float:
    """Per-instance mean of 1/2 (mu'mu + sum sigma^2 - sum log sigma^2)."""
    return float(0.5 * np.sum(mu**2 + sigma**2 - np.log(sigma**2)) / len(mu))


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, config: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "objective": params.objective,
        "input_dim": params.input_dim,
        "n_labels": params.n_labels,
        "latent_dim": params.latent_dim,
        "hidden_dim": params.hidden_dim,
        "config": config or {},
        "blocks": {
            k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.blocks.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    blocks = {
        k: np.array(b["data"], dtype=np.float64).reshape(b["shape"]) for k, b in doc["blocks"].items()
    }
    params = ModelParams(blocks, doc["input_dim"], doc["n_labels"], doc["latent_dim"],
                         doc["hidden_dim"], doc["objective"])
    return params, doc["config"]
