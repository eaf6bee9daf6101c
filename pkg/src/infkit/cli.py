"""
Command-line entry point ``infkit``.

Every subcommand reads the same TOML config, derives all randomness from
``--seed`` through named streams, and writes its artifacts into ``--out``.
Failures exit nonzero and print a JSON error record on stderr (also written
to ``<out>/error.json``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from importlib import resources
from pathlib import Path

import numpy as np

from . import data as datasets
from . import errors
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .experiments import (BackdoorTask, UpdateAborted, backdoor_metrics, perturb, remove,
                          retrain_oracle)
from .influence import METHODS, compute_influence, influence_score
from .metrics import evaluate
from .model import LabeledSet, ModelSpec, ParamVector, TrainLog, train
from .results import read_json, write_csv, write_json, write_text, write_trace_csvs
from .rng import seed_for
from .selection import ALIASES, KINDS, IndexSet, canonical_kind, select_parameters
from .spectral import negative_rate_sweep, sweep_csv

logger = logging.getLogger("infkit")

SUBCOMMANDS = ("train", "select", "influence", "remove", "perturb", "score", "backdoor", "spectrum", "report")
BUNDLED = "bundled:"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_REFUSED = 4


# --------------------------------------------------------------------------
# task assembly
# --------------------------------------------------------------------------


def resolve(path: str | None) -> Path | None:
    """Map ``bundled:NAME`` to a file shipped with the package."""
    if path is None:
        return None
    if path.startswith(BUNDLED):
        return Path(str(resources.files("infkit") / "resources" / path[len(BUNDLED):]))
    return Path(path)


def build_data(cfg: RunConfig, seed: int) -> tuple[LabeledSet, LabeledSet | None]:
    d = cfg.data
    dseed = seed_for(seed, "data")
    if d.kind == "blobs":
        return datasets.blob_splits(d.n_classes, d.dim, d.train_per_class, d.test_per_class, d.spread,
                                    d.center_scale, dseed)
    if d.kind == "digits":
        images, labels = datasets.make_digits(d.train_per_class + d.test_per_class, seed=dseed)
        rows = np.arange(len(labels)) % (d.train_per_class + d.test_per_class) < d.train_per_class
        feats = datasets.to_features(images)
        return LabeledSet(feats[rows], labels[rows]), LabeledSet(feats[~rows], labels[~rows])
    if d.kind == "toy-regression":
        train_set, _ = datasets.toy_regression(dseed)
        return train_set, None
    if d.kind == "csv":
        if not d.train_path:
            raise errors.ConfigError("[data] kind = 'csv' needs train_path")
        train_set = datasets.load_csv_images(d.train_path, d.pixel_scale)
        test_set = datasets.load_csv_images(d.test_path, d.pixel_scale) if d.test_path else None
        return train_set, test_set
    raise errors.ConfigError(f"[data] unknown kind {d.kind!r}")


def build_spec(cfg: RunConfig, train_set: LabeledSet) -> ModelSpec:
    in_dim = train_set.inputs.shape[1]
    if cfg.model.loss == "cross-entropy":
        out_dim = max(cfg.data.n_classes, int(train_set.labels.max()) + 1)
    else:
        out_dim = 1 if train_set.labels.ndim == 1 else train_set.labels.shape[1]
    return cfg.model_spec(in_dim, out_dim)


def removal_mask(cfg: RunConfig, train_set: LabeledSet) -> np.ndarray:
    """Rows to remove: the configured class, or the marked rows of the regression toy."""
    if cfg.data.kind == "toy-regression":
        return train_set.mask.copy()
    return (train_set.labels == cfg.data.removed_class).astype(np.int64)


def relabeled(cfg: RunConfig, train_set: LabeledSet, seed: int) -> LabeledSet:
    """A seeded ``relabel_fraction`` of the ``relabel_from`` rows moved to ``relabel_to``."""
    d = cfg.data
    rows = np.flatnonzero(train_set.labels == d.relabel_from)
    rng = np.random.default_rng(seed_for(seed, "data", 1))
    chosen = rng.choice(rows, size=int(round(d.relabel_fraction * rows.size)), replace=False) if rows.size else rows
    labels = train_set.labels.copy()
    labels[chosen] = d.relabel_to
    return LabeledSet(train_set.inputs, labels)


class Session:
    """Config, seed, data, model and trained parameters for one command."""

    def __init__(self, args):
        self.args = args
        self.cfg = load_config(resolve(args.config)) if args.config else RunConfig()
        apply_overrides(self.cfg, args)
        self.seed = args.seed
        self.train_set, self.test_set = build_data(self.cfg, self.seed)
        self.spec = build_spec(self.cfg, self.train_set)
        self.init = self.spec.init_params(seed_for(self.seed, "init"))
        self.train_config = self.cfg.train_config(seed_for(self.seed, "train"))
        self.out = Path(args.out)
        self._params = None
        self.log = TrainLog()

    @property
    def params(self) -> ParamVector:
        if self._params is None:
            ckpt = resolve(self.args.checkpoint) if self.args.checkpoint else None
            if ckpt is not None and ckpt.exists() and self.args.command != "train":
                self._params = load_checkpoint(ckpt, self.spec)
            else:
                self._params = train(self.spec, self.init, self.train_set, self.train_config, self.log)
        return self._params

    def header(self) -> dict:
        return {"command": self.args.command, "seed": self.seed, "config": self.cfg.to_dict()}


def apply_overrides(cfg: RunConfig, args):
    if getattr(args, "method", None):
        cfg.influence.method = args.method
    if getattr(args, "criterion", None):
        cfg.selection.criterion = canonical_kind(args.criterion)
    if getattr(args, "mr", None) is not None:
        cfg.selection.ratio = args.mr
    if getattr(args, "hessian", None):
        cfg.influence.hessian = args.hessian


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _diagnostics_sink(args, records):
    if getattr(args, "diagnostics", None):
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
        write_text(args.diagnostics, text)


def _indices(s: Session, data: LabeledSet) -> IndexSet:
    if s.cfg.influence.method == "original":
        return IndexSet.full(s.spec.param_count)
    return select_parameters(s.spec, s.params, data, s.cfg.criterion(seed_for(s.seed, "selection")))


def cmd_train(s: Session) -> dict:
    params = s.params
    ckpt = resolve(s.args.checkpoint) if s.args.checkpoint else s.out / "model.gifc"
    save_checkpoint(ckpt, params)
    report = evaluate(s.spec, params, s.test_set, None)
    doc = s.header() | {"checkpoint": str(ckpt), "final_loss": s.log.losses[-1] if s.log.losses else None,
                        "metrics": report.to_dict()}
    write_json(s.out / "train.json", doc)
    return doc


def cmd_select(s: Session) -> dict:
    data = s.train_set.with_mask(removal_mask(s.cfg, s.train_set))
    J = _indices(s, data)
    doc = s.header() | {"selection": J.to_dict()}
    write_json(s.out / "select.json", doc)
    return doc


def cmd_influence(s: Session) -> dict:
    w = removal_mask(s.cfg, s.train_set)
    data = s.train_set.with_mask(w)
    J = _indices(s, data)
    settings = s.cfg.influence_settings(seed_for(s.seed, "influence"))
    res = compute_influence(settings.method, s.spec, s.params, data, w, J, settings.lissa, settings.hessian,
                            settings.solver, settings.regularized, settings.cap)
    _diagnostics_sink(s.args, [res.diagnostics()])
    doc = s.header() | {"diagnostics": res.diagnostics(), "indices": res.indices.indices.tolist(),
                        "influence": res.influence.tolist()}
    write_json(s.out / "influence.json", doc)
    write_csv(s.out / "influence.csv", ("index", "influence"), zip(res.indices.indices.tolist(), res.influence.tolist()))
    return doc


def _run_update(s: Session, stem: str, runner) -> dict:
    try:
        res = runner()
        status, trace, diags, params = "ok", res.trace, res.diagnostics, res.params
    except UpdateAborted as exc:
        _diagnostics_sink(s.args, exc.diagnostics)
        write_json(s.out / f"{stem}.json", s.header() | {"status": "aborted", "error": str(exc),
                                                         "trace": [t.to_dict() for t in exc.trace],
                                                         "diagnostics": exc.diagnostics})
        write_trace_csvs(s.out, stem, exc.trace)
        raise
    _diagnostics_sink(s.args, diags)
    save_checkpoint(s.out / f"{stem}.gifc", params)
    doc = s.header() | {"status": status, "trace": [t.to_dict() for t in trace], "final": trace[-1].to_dict(),
                        "diagnostics": diags}
    write_json(s.out / f"{stem}.json", doc)
    write_trace_csvs(s.out, stem, trace)
    return doc


def cmd_remove(s: Session) -> dict:
    w = removal_mask(s.cfg, s.train_set)
    settings = s.cfg.influence_settings(seed_for(s.seed, "influence"))
    classes = () if s.cfg.data.kind == "toy-regression" else (s.cfg.data.removed_class,)
    crit = s.cfg.criterion(seed_for(s.seed, "selection"))
    return _run_update(s, "remove", lambda: remove(s.spec, s.params, s.train_set, w, settings, crit, s.cfg.policy(),
                                                   s.test_set, classes))


def cmd_perturb(s: Session) -> dict:
    replacement = relabeled(s.cfg, s.train_set, s.seed)
    settings = s.cfg.influence_settings(seed_for(s.seed, "influence"))
    crit = s.cfg.criterion(seed_for(s.seed, "selection"))
    return _run_update(s, "perturb", lambda: perturb(s.spec, s.params, s.train_set, replacement, settings, crit,
                                                     s.cfg.policy(), test_set=s.test_set))


def cmd_score(s: Session) -> dict:
    """Predicted change of each configured test row's loss after the removal, ``<grad l(z_test), I>``."""
    if s.test_set is None:
        raise errors.ConfigError("score needs a test set")
    w = removal_mask(s.cfg, s.train_set)
    data = s.train_set.with_mask(w)
    J = _indices(s, data)
    settings = s.cfg.influence_settings(seed_for(s.seed, "influence"))
    res = compute_influence(settings.method, s.spec, s.params, data, w, J, settings.lissa, settings.hessian,
                            settings.solver, settings.regularized, settings.cap)
    _diagnostics_sink(s.args, [res.diagnostics()])
    rows = []
    for r in s.cfg.eval.test_rows:
        if not 0 <= r < s.test_set.size:
            raise errors.DomainError(f"test row {r} outside [0, {s.test_set.size})")
        x, y = s.test_set.inputs[r], s.test_set.labels[r]
        # removal moves theta by -I/m, so the loss changes by -<grad, I>/m
        rows.append((r, -influence_score(s.spec, s.params, (x, y), res) / s.train_set.size))
    write_csv(s.out / "score.csv", ("test_row", "score"), rows)
    doc = s.header() | {"diagnostics": res.diagnostics(), "scores": [{"test_row": r, "score": v} for r, v in rows]}
    write_json(s.out / "score.json", doc)
    return doc


def cmd_backdoor(s: Session) -> dict:
    d = s.cfg.data
    if d.kind != "digits":
        raise errors.ConfigError("backdoor needs [data] kind = 'digits'")
    bd = datasets.BackdoorSpec(d.poison_fraction, d.bd_label, seed_for(s.seed, "backdoor"), d.bd_amplitude)
    images, labels = datasets.make_digits(d.train_per_class + d.test_per_class, seed=seed_for(s.seed, "data"))
    rows = np.arange(len(labels)) % (d.train_per_class + d.test_per_class) < d.train_per_class
    p_img, p_lab, poisoned = datasets.poison(images[rows], labels[rows], bd)
    s.train_set = LabeledSet(datasets.to_features(p_img), p_lab)
    params = s.params
    task = BackdoorTask(s.spec, s.train_set, labels[rows], poisoned, s.test_set,
                        datasets.to_features(datasets.implant(images[~rows], bd)), params, s.init, bd,
                        s.train_config)
    settings = s.cfg.influence_settings(seed_for(s.seed, "influence"))
    crit = s.cfg.criterion(seed_for(s.seed, "selection"))
    before = backdoor_metrics(task, params)
    res = perturb(s.spec, params, s.train_set, task.replacement, settings, crit, s.cfg.policy(), w=task.mask,
                  test_set=s.test_set) if poisoned.size else None
    after = backdoor_metrics(task, res.params) if res else before
    stages = {"poisoned": before.accuracies(), "recovered": after.accuracies()}
    if s.args.oracle:
        stages["retrained"] = backdoor_metrics(task, retrain_oracle(s.spec, s.init, s.train_set, s.train_config,
                                                                    task.mask, task.replacement)).accuracies()
    if res:
        _diagnostics_sink(s.args, res.diagnostics)
        save_checkpoint(s.out / "backdoor.gifc", res.params)
    doc = s.header() | {"poisoned_rows": int(poisoned.size), "stages": stages,
                        "trace": [t.to_dict() for t in res.trace] if res else []}
    write_json(s.out / "backdoor.json", doc)
    write_csv(s.out / "backdoor.csv", ("stage", "test_acc", "bd_true_acc", "bd_label_acc"),
              [(k, v["test_acc"], v["bd_true_acc"], v["bd_label_acc"]) for k, v in stages.items()])
    return doc


def cmd_spectrum(s: Session) -> dict:
    e = s.cfg.eval
    reports = negative_rate_sweep(s.spec, s.params, s.train_set, sorted(e.lambdas), e.top_k,
                                  e.lanczos_iters or None, seed_for(s.seed, "probe"))
    write_text(s.out / "spectrum.csv", sweep_csv(reports))
    doc = s.header() | {"sweep": [{"lambda": r.lam, "neg_fraction": r.negative_fraction,
                                   "eigenvalues": r.eigenvalues.tolist(), "iterations": r.iterations}
                                  for r in reports]}
    write_json(s.out / "spectrum.json", doc)
    return doc


def cmd_report(args) -> dict:
    """Re-render the trace and histogram CSVs of a saved run."""
    src = Path(args.run)
    doc = read_json(src)
    if "trace" not in doc:
        raise errors.ConfigError(f"{src} holds no step trace")
    out = Path(args.out) if args.out else src.parent
    paths = write_trace_csvs(out, src.stem, doc["trace"])
    return {"command": "report", "written": [str(p) for p in paths]}


COMMANDS = {
    "train": cmd_train, "select": cmd_select, "influence": cmd_influence, "remove": cmd_remove,
    "perturb": cmd_perturb, "score": cmd_score, "backdoor": cmd_backdoor, "spectrum": cmd_spectrum,
}


# --------------------------------------------------------------------------
# argument parsing and error handling
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="TOML run config ('bundled:toy.toml' for the shipped task)")
    p.add_argument("--seed", type=int, default=0, metavar="N", help="root seed for every random stream (default 0)")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="trained parameters to load ('train' writes here); trains in-process when missing")
    p.add_argument("--out", default="results", metavar="DIR", help="directory for result files (default results)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics and no timing fields, so reruns are byte-identical")
    p.add_argument("--diagnostics", metavar="PATH", help="write solver diagnostics as JSON lines to PATH")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def _influence_flags(p: argparse.ArgumentParser):
    p.add_argument("--method", choices=METHODS, help="influence method (overrides [influence] method)")
    p.add_argument("--criterion", choices=sorted(set(KINDS) | set(ALIASES)),
                   help="parameter selection criterion (overrides [selection] criterion)")
    p.add_argument("--mr", type=float, metavar="FLOAT", help="modification ratio in (0, 1] (overrides [selection] ratio)")
    p.add_argument("--hessian", choices=("plain", "newton"), help="Hessian variant (overrides [influence] hessian)")


HELP = {
    "train": "train the configured model and save a checkpoint",
    "select": "select the parameter index set for the configured removal",
    "influence": "compute the influence vector of the configured removal",
    "remove": "unlearn the configured class (or marked rows) and emit the step trace",
    "perturb": "relabel configured rows through an influence update",
    "score": "predicted test-loss change of the configured removal for chosen test rows",
    "backdoor": "poison digit data with the checkerboard trigger and recover it",
    "spectrum": "negative-eigenvalue rate of H + lambda*I over a lambda grid",
    "report": "re-render CSV files from a saved JSON run",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infkit", description="Influence-based unlearning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        if name == "report":
            p.add_argument("run", metavar="RUN_JSON", help="JSON file written by remove, perturb or backdoor")
            p.add_argument("--out", metavar="DIR", help="output directory (default: next to RUN_JSON)")
            p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
            continue
        _common(p)
        if name not in ("train", "spectrum"):
            _influence_flags(p)
        if name == "backdoor":
            p.add_argument("--oracle", action="store_true", help="also retrain from scratch on relabeled data")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, errors.ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (errors.NumericError, errors.SingularError, errors.ConvergenceError, errors.TrainingError,
                        UpdateAborted)):
        return EXIT_NUMERIC
    if isinstance(exc, (errors.RefusedError, errors.DomainError, errors.ShapeError)):
        return EXIT_REFUSED
    return EXIT_ERROR


def _thread_limit(deterministic: bool):
    env = os.environ.get("INFKIT_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    if limit is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, limit))


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if args.out else None
    try:
        if args.command == "report":
            doc = cmd_report(args)
        else:
            with _thread_limit(args.deterministic):
                start = time.perf_counter()
                session = Session(args)
                doc = COMMANDS[args.command](session)
                if not args.deterministic:
                    logger.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
        print(json.dumps({"status": "ok", "command": args.command, "out": str(out) if out else None}))
        return EXIT_OK
    except Exception as exc:  # every failure leaves a machine-readable record
        code = _exit_code(exc)
        record = {"status": "error", "command": args.command, "error": type(exc).__name__, "message": str(exc),
                  "exit_code": code}
        if out is not None:
            try:
                write_json(out / "error.json", record)
            except OSError:
                pass
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        if args.verbose >= 2:
            raise
        return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
