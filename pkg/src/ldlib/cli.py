"""Command-line entry point: enhance, eval, gridsearch, ablation, rerun.

Exit codes: 0 success, 2 bad arguments, 3 invalid data, 4 training aborted.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import secrets
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import BinarizeStrategy, DataError, Dataset, binarize, file_checksum, load_dataset
from .metrics import METRIC_NAMES, EvalReport, append_csv_row, evaluate
from .model import CHECKPOINT_FORMAT, LIB, LIB_GAP, recover_all, save_checkpoint
from .trainer import DEFAULT_GRID, TrainConfig, TrainingAborted, grid_search, train

log = logging.getLogger("ldlib")

MANIFEST_SCHEMA = 1
EXIT_ARGS, EXIT_DATA, EXIT_TRAIN = 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        self.code = code
        super().__init__(message)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _batch(text: str):
    if text.upper() == "FULL":
        return "FULL"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"batch must be FULL or a count, got {text!r}") from None


def _strategy(text: str) -> BinarizeStrategy:
    try:
        return BinarizeStrategy.parse(text)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def _add_train_flags(p: argparse.ArgumentParser, objective: bool = True) -> None:
    p.add_argument("--dataset", required=True, type=Path, help="dataset CSV (f:/d:/l: columns)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--latent-dim", type=int, default=256)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=_batch, default="FULL")
    p.add_argument("--mc-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="drawn from system entropy when omitted")
    p.add_argument("--binarize", type=_strategy, default=BinarizeStrategy(),
                   help="mean-threshold | top-k:K | fixed-threshold:T (used only without l: columns)")
    if objective:
        p.add_argument("--objective", choices=("lib", "libgap"), default="lib")
    p.add_argument("--out-dir", type=Path, default=Path("."))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldlib", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"ldlib {__version__} (checkpoint format {CHECKPOINT_FORMAT}, "
                                f"manifest schema {MANIFEST_SCHEMA})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="recover label distributions from logical labels")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="score predicted distributions against ground truth")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--truth", required=True, type=Path)
    p.add_argument("--out", type=Path, default=None, help="report.json path (default: stdout)")
    p.add_argument("--csv", type=Path, default=None, help="append a (dataset, method, metrics) row here")
    p.add_argument("--name", default=None, help="dataset name for --csv (default: truth file stem)")
    p.add_argument("--method", default="LIB")

    p = sub.add_parser("gridsearch", help="train and score every (alpha, beta) pair")
    _add_train_flags(p)
    p.add_argument("--alphas", type=_float_list, default=list(DEFAULT_GRID))
    p.add_argument("--betas", type=_float_list, default=list(DEFAULT_GRID))
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("ablation", help="compare LIB against the gap-only objective")
    _add_train_flags(p, objective=False)

    p = sub.add_parser("rerun", help="repeat a recorded run from its manifest.json")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out-dir", type=Path, default=None)
    return parser


# -- helpers ------------------------------------------------------------------


def _load_training_data(args) -> Dataset:
    try:
        ds = load_dataset(args.dataset)
    except (OSError, DataError) as err:
        raise CliError(str(err), EXIT_DATA) from err
    if ds.L is None:
        try:
            ds.L = binarize(ds.D, args.binarize)
        except ValueError as err:
            raise CliError(str(err), EXIT_ARGS) from err
    return ds


def _config(args, objective: str) -> TrainConfig:
    try:
        return TrainConfig(
            alpha=args.alpha, beta=args.beta, latent_dim=args.latent_dim, hidden_dim=args.hidden_dim,
            epochs=args.epochs, learning_rate=args.lr, batch=args.batch, seed=args.seed,
            mc_samples=args.mc_samples, objective=objective,
        )
    except ValueError as err:
        raise CliError(str(err), EXIT_ARGS) from err


class Manifest:
    """manifest.json: written before training, finalized afterwards."""

    def __init__(self, out_dir: Path, argv: list[str], command: str, config: TrainConfig, args):
        self.path = out_dir / "manifest.json"
        self.doc = {
            "schema": MANIFEST_SCHEMA,
            "tool": "ldlib",
            "tool_version": __version__,
            "command": command,
            "argv": argv,
            "config": config.to_dict(),
            "seed": config.seed,
            "binarize": str(args.binarize),
            "dataset": {"path": str(args.dataset), "sha256": file_checksum(args.dataset)},
            "outputs": [],
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.doc, indent=2) + "\n")

    def finish(self, status: str, outputs: list[Path], **extra):
        self.doc.update(status=status, outputs=[str(p) for p in outputs], finished=_now(), **extra)
        self._write()


def _prepare(args, argv, command, objective) -> tuple[Dataset, TrainConfig, Manifest]:
    if args.seed is None:
        args.seed = secrets.randbits(31)
    config = _config(args, objective)
    ds = _load_training_data(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return ds, config, Manifest(args.out_dir, argv, command, config, args)


def write_distributions(path: Path, D: np.ndarray, label_names: list[str]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"d:{n}" for n in label_names])
        for row in D:
            w.writerow([repr(float(v)) for v in row])


def read_distributions(path: Path) -> tuple[np.ndarray, list[str]]:
    """The d: block of any dataset-style CSV."""
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        idx = [i for i, h in enumerate(header) if h.startswith("d:")]
        if not idx:
            raise DataError("no d:<label> columns", path=path)
        rows = []
        for lineno, rec in enumerate(reader, start=1):
            if not rec:
                continue
            try:
                rows.append([float(rec[i]) for i in idx])
            except (ValueError, IndexError):
                raise DataError("missing or non-numeric distribution cell", row=lineno, path=path) from None
    return np.array(rows, dtype=np.float64).reshape(-1, len(idx)), [header[i][2:] for i in idx]


def _train_or_abort(ds: Dataset, config: TrainConfig, manifest: Manifest, outputs: list[Path]):
    try:
        return train(ds.X, ds.L, config)
    except TrainingAborted as err:
        err.history.to_csv(manifest.path.parent / "history.csv")
        manifest.finish("aborted", outputs, error=str(err))
        raise CliError(str(err), EXIT_TRAIN) from err


# -- commands -----------------------------------------------------------------


def cmd_enhance(args, argv) -> int:
    objective = LIB if args.objective == "lib" else LIB_GAP
    ds, config, manifest = _prepare(args, argv, "enhance", objective)
    out = args.out_dir
    params, history = _train_or_abort(ds, config, manifest, [])
    D_hat = recover_all(params, ds.X)
    files = [out / "recovered.csv", out / "params.ckpt", out / "history.csv", manifest.path]
    write_distributions(files[0], D_hat, ds.label_names)
    save_checkpoint(files[1], params, config.to_dict())
    history.to_csv(files[2])
    manifest.finish("ok", files)
    return 0


def cmd_eval(args, argv) -> int:
    try:
        pred, _ = read_distributions(args.pred)
        truth, _ = read_distributions(args.truth)
        report = evaluate(truth, pred)
    except (OSError, DataError) as err:
        raise CliError(str(err), EXIT_DATA) from err
    text = report.to_json() + "\n"
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    if args.csv:
        append_csv_row(args.csv, args.name or args.truth.stem, args.method, report)
    return 0


def _require_truth(ds: Dataset, command: str):
    if ds.D is None:
        raise CliError(f"{command} needs ground-truth d: columns", EXIT_DATA)


def cmd_gridsearch(args, argv) -> int:
    objective = LIB if args.objective == "lib" else LIB_GAP
    ds, config, manifest = _prepare(args, argv, "gridsearch", objective)
    _require_truth(ds, "gridsearch")
    result = grid_search(ds, args.alphas, args.betas, config, workers=args.workers)
    grid_path = args.out_dir / "grid.csv"
    with grid_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "beta", "seed", "status", *METRIC_NAMES])
        for c in result.cells:
            vals = [repr(v) for v in c.report.values()] if c.report else [""] * len(METRIC_NAMES)
            w.writerow([repr(c.alpha), repr(c.beta), c.seed, c.status if not c.error else f"failed: {c.error}", *vals])
    best_path = args.out_dir / "best.json"
    outputs = [grid_path, best_path, manifest.path]
    if result.best is None:
        best_path.write_text(json.dumps({"best": None}) + "\n")
        manifest.finish("failed", outputs)
        raise CliError("every grid cell failed", EXIT_TRAIN)
    b = result.best
    best_path.write_text(json.dumps({"alpha": b.alpha, "beta": b.beta, "seed": b.seed,
                                     "report": json.loads(b.report.to_json())}, indent=2) + "\n")
    manifest.finish("ok", outputs)
    return 0


def cmd_ablation(args, argv) -> int:
    ds, config, manifest = _prepare(args, argv, "ablation", LIB)
    _require_truth(ds, "ablation")
    rows = []
    for label, objective in (("LIB", LIB), ("LIB_gap", LIB_GAP)):
        params, _ = _train_or_abort(ds, replace(config, objective=objective), manifest, [])
        rows.append((label, evaluate(ds.D, recover_all(params, ds.X))))
    path = args.out_dir / "ablation.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *METRIC_NAMES])
        for label, report in rows:
            w.writerow([label, *(repr(v) for v in report.values())])
    manifest.finish("ok", [path, manifest.path])
    return 0


def cmd_rerun(args, argv) -> int:
    try:
        doc = json.loads(args.manifest.read_text())
    except (OSError, ValueError) as err:
        raise CliError(f"cannot read manifest: {err}", EXIT_ARGS) from err
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise CliError(f"unsupported manifest schema {doc.get('schema')!r}", EXIT_ARGS)
    replay = list(doc["argv"]) + ["--seed", str(doc["seed"])]
    if args.out_dir is not None:
        replay += ["--out-dir", str(args.out_dir)]
    return main(replay)


COMMANDS = {
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "gridsearch": cmd_gridsearch,
    "ablation": cmd_ablation,
    "rerun": cmd_rerun,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad arguments, 0 on --help/--version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except CliError as err:
        print(f"ldlib {args.command}: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
