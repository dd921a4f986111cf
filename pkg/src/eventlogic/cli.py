"""Command-line entry point: ``eventlogic <command> [flags]``.

Configuration precedence is defaults < ``--config`` JSON < flags.  Every
command writes ``run.json`` with the resolved configuration; timestamps
appear only there, so CSV outputs of identical configurations are
byte-identical.  Failures print one JSON line on stderr and exit with

    1 usage, 2 config, 3 runtime, 4 check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .diagnostics import (
    INTERVENTION_MODES,
    SWEEP_AXES,
    influence_probe,
    intervention_sweep,
    stratify,
    sweep,
    sweep_csv,
)
from .eventifier import Eventifier
from .experiment import ExperimentConfig, build_corpora, run_experiment
from .gradcheck import gradient_suite
from .model import init_model
from .trainer import CheckpointError, evaluate, load_checkpoint, prepare_corpus, save_checkpoint
from .world import generate_corpus, read_corpus, write_corpus

logger = logging.getLogger("eventlogic")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


def _load_json(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_CONFIG, "config", f"cannot read {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "config", f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, "config", f"{path} must hold a JSON object")
    return data


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then explicit flags."""
    data = _load_json(args.config) if getattr(args, "config", None) else {}
    try:
        cfg = ExperimentConfig.from_dict(data)
        world, train, model = cfg.world, cfg.train, cfg.model
        if getattr(args, "k", None) is not None:
            world = replace(world, k=args.k)
        if getattr(args, "epochs", None) is not None:
            train = replace(train, epochs=args.epochs)
        if getattr(args, "alpha", None) is not None:
            train = replace(train, objective=replace(train.objective, alpha=args.alpha))
        changes = {"world": world, "train": train, "model": model}
        if getattr(args, "n", None) is not None:
            changes["n_train"] = args.n
        if getattr(args, "n_eval", None) is not None:
            changes["n_eval"] = args.n_eval
        cfg = replace(cfg, **changes)
        if getattr(args, "seed", None) is not None:
            cfg = cfg.with_seed(args.seed)
        return cfg
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from exc


def write_run_json(out: Path, command: str, argv: Sequence[str], resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": list(argv),
        "resolved": resolved,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _out_dir(args) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise CliError(EXIT_CONFIG, "config", f"--out {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# Shared loading
# --------------------------------------------------------------------------


def _checkpoint(path: str):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from exc


def _scenarios(args, cfg: ExperimentConfig):
    if getattr(args, "corpus", None):
        try:
            scen = read_corpus(args.corpus)
        except OSError as exc:
            raise CliError(EXIT_CONFIG, "config", f"cannot read {args.corpus}: {exc.strerror}") from exc
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, "config", str(exc)) from exc
        if not scen:
            raise CliError(EXIT_CONFIG, "config", f"{args.corpus} holds no scenarios")
        return scen
    return generate_corpus(cfg.world, cfg.n_eval or cfg.n_train, cfg.corpus_seed + 1000)


def _prepared_for(model, scen):
    """Eventify ``scen`` with the checkpoint's prototypes after checking feature widths."""
    d_world = scen[0].config.d
    if model.config.d != d_world:
        raise CliError(EXIT_CONFIG, "config",
                       f"feature width mismatch: checkpoint d={model.config.d}, corpus d={d_world}")
    if model.prototypes is None:
        raise CliError(EXIT_CONFIG, "config", "checkpoint carries no eventifier prototypes")
    ev = Eventifier.for_noise(model.prototypes, scen[0].config.noise, d_world)
    return prepare_corpus(scen, ev)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_gen(args, argv) -> int:
    cfg = resolve_config(args)
    seed = args.seed if args.seed is not None else cfg.corpus_seed
    out = Path(args.out)
    if out.is_dir():
        raise CliError(EXIT_CONFIG, "config", f"--out {out} is a directory; gen writes a JSONL file")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out, generate_corpus(cfg.world, cfg.n_train, seed))
    write_run_json(out.parent, "gen", argv, {"world": cfg.world.to_dict(), "n": cfg.n_train, "seed": seed,
                                             "corpus": out.name})
    return EXIT_OK


def cmd_train(args, argv) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    write_run_json(out, "train", argv, cfg.to_dict())
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    res = run_experiment(cfg, metrics_path=out / "metrics.csv", checkpoint_dir=ckpt_dir)
    save_checkpoint(res.result.model, out / "model.json", res.result.optimizers, cfg.train.epochs, cfg.train)
    summary = {"before": res.before.summary(), "after": res.after.summary()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


EVAL_HEADER = ("seed", "density", "f1", "semantic_f1", "length", "belief", "logic", "pred", "margin")


def cmd_eval(args, argv) -> int:
    ck = _checkpoint(args.checkpoint)
    cfg = resolve_config(args)
    scen = _scenarios(args, cfg)
    prepared = _prepared_for(ck.model, scen)
    out = _out_dir(args)
    write_run_json(out, "eval", argv, {**cfg.to_dict(), "checkpoint": str(args.checkpoint),
                                       "corpus": args.corpus, "n_select": args.n_select})
    report = evaluate(ck.model, prepared, cfg.train.objective, args.n_select, seed=cfg.train.seed)
    rows = [(r.seed, r.density, repr(r.f1), repr(r.semantic_f1), r.length, repr(r.belief), repr(r.logic),
             repr(r.pred), repr(float(np.mean(list(r.margins.values()))) if r.margins else float("nan")))
            for r in report.rows]
    (out / "eval.csv").write_text(_csv(EVAL_HEADER, rows))
    tiers, notes = stratify(report)
    (out / "tiers.csv").write_text(_csv(("tier", "n", "f1", "utility"),
                                        [(t.tier, t.n, repr(t.f1), repr(t.utility)) for t in tiers]))
    for note in notes:
        logger.info(note)
    return EXIT_OK


def cmd_intervene(args, argv) -> int:
    ck = _checkpoint(args.checkpoint)
    cfg = resolve_config(args)
    prepared = _prepared_for(ck.model, _scenarios(args, cfg))
    out = _out_dir(args)
    write_run_json(out, "intervene", argv, {**cfg.to_dict(), "checkpoint": str(args.checkpoint),
                                            "corpus": args.corpus, "modes": list(INTERVENTION_MODES)})
    results = intervention_sweep(ck.model, prepared, INTERVENTION_MODES, cfg.train.objective,
                                 args.n_select, seed=cfg.train.seed)
    rows = [(r.mode, repr(r.clean), repr(r.corrupted), repr(r.delta), r.n, r.n_applied) for r in results]
    (out / "interventions.csv").write_text(_csv(("mode", "clean", "corrupted", "delta", "n", "n_applied"), rows))
    return EXIT_OK


def _grid(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "usage", f"--grid must be a comma list of numbers: {exc}") from exc
    if not vals:
        raise CliError(EXIT_USAGE, "usage", "--grid is empty")
    return vals


def cmd_sweep(args, argv) -> int:
    cfg = resolve_config(args)
    grid = _grid(args.grid)
    out = _out_dir(args)
    write_run_json(out, "sweep", argv, {**cfg.to_dict(), "axis": args.axis, "grid": grid})
    rows = sweep(args.axis, grid, cfg)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    seed = args.seed if args.seed is not None else 0
    res = gradient_suite(seed, args.instances, sample=None if args.full else args.sample)
    if args.out:
        out = _out_dir(args)
        write_run_json(out, "gradcheck", argv, {"seed": seed, "instances": args.instances, "full": args.full,
                                                "sample": args.sample, "tolerance": res.tolerance})
        rows = [(path, i, repr(r.max_rel_error), r.n_checked, "" if r.worst is None else f"{r.worst[0]}[{r.worst[1]}]")
                for (path, i), r in sorted(res.reports.items())]
        (out / "gradcheck.csv").write_text(_csv(("path", "instance", "max_rel_error", "n_checked", "worst"), rows))
    print(json.dumps({"ok": res.ok, "max_rel_error": res.max_rel_error, "per_path": res.per_path(),
                      "failures": [f"{p}#{i}" for p, i in res.failures], "seconds": round(res.seconds, 3)},
                     sort_keys=True))
    if not res.ok:
        raise CliError(EXIT_CHECK, "check", f"{len(res.failures)} gradient checks above {res.tolerance}")
    return EXIT_OK


INFLUENCE_HEADER = ("probe", "train_seed", "test_seed", "eta", "belief", "predicted", "actual", "rel_error",
                    "inner", "factored")


def cmd_influence(args, argv) -> int:
    cfg = resolve_config(args)
    if args.eta <= 0:
        raise CliError(EXIT_USAGE, "usage", "--eta must be positive")
    if args.checkpoint:
        model = _checkpoint(args.checkpoint).model
        prepared = _prepared_for(model, _scenarios(args, cfg))
    else:
        corpora, ev = build_corpora(replace(cfg, n_eval=0))
        prepared = corpora.train
        model = init_model(cfg.model, prototypes=ev.prototypes)
    cb = model.codebook
    usable = [p for p in prepared if p.negatives and any(not cb.is_temporal(e.z) for e in p.truth_local)]
    if len(usable) < 2:
        raise CliError(EXIT_RUNTIME, "runtime", "fewer than two scenarios with semantic truth edges")
    out = _out_dir(args)
    write_run_json(out, "influence", argv, {**cfg.to_dict(), "checkpoint": args.checkpoint, "eta": args.eta,
                                            "probes": args.probes})
    rows = []
    for i in range(args.probes):
        tr, te = usable[i % len(usable)], usable[(7 * i + 3) % len(usable)]
        r = influence_probe(model, tr, tr.truth_local, te, te.truth_local, args.eta, cfg.train.objective)
        rows.append((i, r.train_id, r.test_id, repr(r.eta), repr(r.belief), repr(r.predicted), repr(r.actual),
                     repr(r.rel_error), repr(r.inner), repr(r.factored)))
    (out / "influence.csv").write_text(_csv(INFLUENCE_HEADER, rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser and dispatch
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="training seed (gen: corpus seed)")
    common.add_argument("--config", help="JSON file with world/model/train/n_train/n_eval/corpus_seed")
    common.add_argument("--out", help="output directory (gen: corpus JSONL path)")
    common.add_argument("--k", type=int, help="events per scenario")
    common.add_argument("--n", type=int, help="number of training scenarios")
    common.add_argument("--n-eval", dest="n_eval", type=int, help="number of held-out scenarios")
    common.add_argument("--epochs", type=int)
    common.add_argument("--alpha", type=float, help="sparsity weight")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="eventlogic", description="Event-chain reasoning experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen", parents=[common], help="write a scenario corpus (JSONL)")
    g.set_defaults(func=cmd_gen, needs_out=True)
    t = sub.add_parser("train", parents=[common], help="train, checkpoint and log metrics")
    t.set_defaults(func=cmd_train, needs_out=True)
    for name, func, needs_ckpt, desc in (("eval", cmd_eval, True, "held-out metrics and density tiers"),
                                         ("intervene", cmd_intervene, True, "chain corruption utility drops")):
        s = sub.add_parser(name, parents=[common], help=desc)
        s.add_argument("--checkpoint", required=needs_ckpt)
        s.add_argument("--corpus", help="scenario JSONL; default: held-out corpus from the config")
        s.add_argument("--n-select", dest="n_select", type=int, default=5)
        s.set_defaults(func=func, needs_out=True)
    sw = sub.add_parser("sweep", parents=[common], help="train and evaluate across one axis")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--grid", required=True, help="comma-separated values")
    sw.set_defaults(func=cmd_sweep, needs_out=True)
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite; exit 4 on failure")
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--sample", type=int, default=8, help="entries checked per tensor")
    gc.add_argument("--full", action="store_true", help="check every entry")
    gc.set_defaults(func=cmd_gradcheck, needs_out=False)
    inf = sub.add_parser("influence", parents=[common], help="first-order influence probes")
    inf.add_argument("--checkpoint")
    inf.add_argument("--corpus")
    inf.add_argument("--eta", type=float, default=1e-4)
    inf.add_argument("--probes", type=int, default=20)
    inf.set_defaults(func=cmd_influence, needs_out=True)
    return p


def _fail(exc: CliError) -> int:
    print(json.dumps({"error": exc.kind, "exit": exc.code, "message": str(exc)}, sort_keys=True), file=sys.stderr)
    return exc.code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.needs_out and not args.out:
            raise CliError(EXIT_USAGE, "usage", f"{args.command} requires --out")
        return args.func(args, argv)
    except CliError as exc:
        return _fail(exc)
    except Exception as exc:  # noqa: BLE001 - surface as a single machine-readable line
        logger.debug("runtime failure", exc_info=True)
        return _fail(CliError(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}"))


if __name__ == "__main__":
    sys.exit(main())
