"""Command-line entry point: train / attack / eval / diagnose / experiment.

Every command reads one JSON config (see ``ExperimentConfig``); CLI
flags override top-level fields and ``--override key.path=value`` edits
any nested field before parsing.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import attacks, defenses, experiment, model, solver
from .datasets import gen_synthetic
from .defenses import DefenseStrategy
from .experiment import ExperimentConfig, config_from_dict
from . import numkit


def apply_override(doc: dict, spec: str) -> None:
    key, sep, raw = spec.partition("=")
    if not sep:
        raise ValueError(f"override {spec!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def load_config(
    path: str | Path,
    seed: int | None = None,
    out_dir: str | None = None,
    overrides: tuple[str, ...] = (),
) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    for spec in overrides:
        apply_override(doc, spec)
    if seed is not None:
        doc["seed"] = seed
    if out_dir is not None:
        doc["out_dir"] = out_dir
    return config_from_dict(doc)


def _prepare(cfg: ExperimentConfig):
    data = gen_synthetic(
        cfg.data.kind, cfg.data.n, cfg.data.noise, cfg.data.l,
        seed=numkit.derived_seed(cfg.seed, "data"),
        test_frac=cfg.data.test_frac, dev_frac=cfg.data.dev_frac,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return data, out


def _load_model(cfg: ExperimentConfig):
    if not cfg.checkpoint:
        raise ValueError("this command needs a 'checkpoint' path in the config")
    return model.load_checkpoint(cfg.checkpoint)


def cmd_train(cfg: ExperimentConfig) -> int:
    data, out = _prepare(cfg)
    p, log = experiment._prepare_model(cfg, data, cfg.solver, cfg.backward)
    model.save_checkpoint(p, out / "checkpoint.json")
    if log is not None:
        log.write_csv(out / "trainlog.csv")
        last = log.rows[-1]
        print(f"trained {cfg.train.epochs} epochs; "
              f"dev clean={last.dev_clean_acc:.4f} robust={last.dev_robust_acc:.4f} "
              f"(best epoch {log.best_epoch})")
    print(f"checkpoint written to {out / 'checkpoint.json'}")
    return 0


def cmd_attack(cfg: ExperimentConfig) -> int:
    data, out = _prepare(cfg)
    p, defense_doc = _load_model(cfg)
    defense = (
        DefenseStrategy.from_dict(defense_doc) if defense_doc else DefenseStrategy.final()
    )
    X, y = data.split("test")
    rng = numkit.make_rng(numkit.derived_seed(cfg.seed, "attack"))
    report = attacks.evaluate_robustness(
        p, X, y, cfg.attack, defense, cfg.solver, cfg.backward, rng=rng
    )
    attacks.write_reports_csv([report], out / "reports.csv")
    attacks.write_summary_json([report], out / "summary.json")
    print(f"defense={report.defense} source={report.source} "
          f"clean={report.clean_accuracy:.4f} robust={report.robust_accuracy:.4f}")
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    data, out = _prepare(cfg)
    p, _ = _load_model(cfg)
    X_dev, y_dev = data.split("dev")
    X_test, y_test = data.split("test")
    n_star = defenses.calibrate_early_exit(
        p, X_dev, y_dev, cfg.train.attack, cfg.solver, cfg.backward,
        rng=numkit.make_rng(numkit.derived_seed(cfg.seed, "calibrate")),
    )
    model.save_checkpoint(p, out / "checkpoint.json",
                          defense={"kind": "early", "n_star": n_star})
    reports = []
    for strat in (DefenseStrategy.final(), DefenseStrategy.early(n_star),
                  DefenseStrategy.ensemble()):
        rng = numkit.make_rng(numkit.derived_seed(cfg.seed, "eval", strat.describe()))
        rep = attacks.evaluate_robustness(
            p, X_test, y_test, cfg.attack, strat, cfg.solver, cfg.backward, rng=rng
        )
        reports.append(rep)
        print(f"defense={rep.defense:12s} clean={rep.clean_accuracy:.4f} "
              f"robust={rep.robust_accuracy:.4f}")
    attacks.write_summary_json(reports, out / "summary.json")
    print(f"early exit calibrated at n_star={n_star}")
    return 0


def cmd_diagnose(cfg: ExperimentConfig, n_examples: int = 5) -> int:
    data, out = _prepare(cfg)
    p, _ = _load_model(cfg)
    X, _ = data.split("test")
    final_errs = []
    for i, x in enumerate(X[:n_examples]):
        trace = solver.solve(p, x, cfg.solver)
        solver.write_trace_csv(trace, out / f"trace_{i}.csv")
        final_errs.append(trace.rel_errors[-1])
    mean_err = sum(final_errs) / len(final_errs)
    print(f"wrote {len(final_errs)} trace files; mean final rel_error={mean_err:.6g}")
    return 0


def cmd_experiment(cfg: ExperimentConfig) -> int:
    result = experiment.run_experiment(cfg)
    print(f"outputs in {result.out_dir}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "experiment": cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="deqrb",
        description="Equilibrium-model robustness toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to the JSON config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="override the output directory")
        sp.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE",
            help="override a nested config field, e.g. train.epochs=5",
        )
    args = parser.parse_args(argv)
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out,
                      overrides=tuple(args.override))
    return COMMANDS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
