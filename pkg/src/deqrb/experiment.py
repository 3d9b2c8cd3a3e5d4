"""End-to-end experiment runner: train, calibrate, attack grid, CSV reports.

A single JSON config drives everything. The experiment seed is the only
entropy source: data generation, initialization, training and every
attack cell derive their own streams from it, so two runs with the same
config produce byte-identical output files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks, defenses, model, numkit, solver, training
from .attacks import AttackConfig, AttackReport
from .datasets import Dataset, gen_synthetic
from .defenses import DefenseStrategy
from .gradients import BackwardConfig, GradientSource
from .model import LayerParams, ModelDims
from .solver import SolverConfig
from .training import TrainConfig, TrainLog


@dataclass
class DataConfig:
    kind: str = "moons"
    n: int = 1000
    noise: float = 0.1
    l: int = 2
    test_frac: float = 0.2
    dev_frac: float = 0.2


@dataclass
class GridConfig:
    """Which attack columns and defense rows the cross-table runs."""

    defenses: list[str] = field(default_factory=lambda: ["final", "early", "ensemble"])
    families: list[str] = field(default_factory=lambda: ["adjoint", "unrolled"])
    include_exact_final: bool = True
    intermediate_candidates: list[int] = field(default_factory=list)  # empty -> 1..N-1
    k: int = 1
    damping: float = 1.0
    beta: float = 0.5
    run_ablations: bool = True
    ablation_ks: list[int] = field(default_factory=lambda: [1, 3, 5])
    ablation_damping: list[float] = field(default_factory=lambda: [0.5, 1.0])
    ablation_betas: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    ablation_examples: int = 200  # 0 -> full test split

    def __post_init__(self):
        if not self.defenses:
            raise ValueError("grid needs at least one defense")
        for kind in self.defenses:
            if kind not in defenses.DEFENSE_KINDS:
                raise ValueError(f"unknown defense kind {kind!r}")
        for fam in self.families:
            if fam not in ("adjoint", "unrolled"):
                raise ValueError(f"unknown gradient family {fam!r}")
        if not self.families and not self.include_exact_final:
            raise ValueError("grid needs at least one attack column")


@dataclass
class ExperimentConfig:
    """Fully explicit description of one experiment run.

    ``seed`` drives all randomness (the nested train.seed is re-derived
    from it when the experiment trains a model).
    """

    seed: int = 0
    out_dir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    d: int = 16
    activation: str = "tanh"
    solver: SolverConfig = field(default_factory=SolverConfig)
    backward: BackwardConfig = field(default_factory=BackwardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    checkpoint: str | None = None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    doc = asdict(cfg)
    doc["attack"]["source"] = cfg.attack.source.to_dict()
    doc["train"]["attack"]["source"] = cfg.train.attack.source.to_dict()
    return doc


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)

    def build_attack(sub: dict) -> AttackConfig:
        sub = dict(sub)
        if "source" in sub:
            sub["source"] = GradientSource.from_dict(sub["source"])
        if "box" in sub:
            sub["box"] = tuple(sub["box"])
        return AttackConfig(**sub)

    if "data" in doc:
        doc["data"] = DataConfig(**doc["data"])
    if "solver" in doc:
        doc["solver"] = SolverConfig(**doc["solver"])
    if "backward" in doc:
        doc["backward"] = BackwardConfig(**doc["backward"])
    if "train" in doc:
        tr = dict(doc["train"])
        if "adam" in tr:
            tr["adam"] = training.AdamConfig(**tr["adam"])
        if "attack" in tr:
            tr["attack"] = build_attack(tr["attack"])
        doc["train"] = TrainConfig(**tr)
    if "attack" in doc:
        doc["attack"] = build_attack(doc["attack"])
    if "grid" in doc:
        doc["grid"] = GridConfig(**doc["grid"])
    return ExperimentConfig(**doc)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), sort_keys=True, indent=2), encoding="utf-8"
    )


def load_config_file(path: str | Path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cell_rng(seed: int, defense: str, source: str) -> np.random.Generator:
    """The generator a single grid cell uses (reproducible in isolation)."""
    return numkit.make_rng(numkit.derived_seed(seed, "cell", defense, source))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dataset: Dataset
    params: LayerParams
    n_star: int | None
    chosen_intermediate: dict[str, int]
    reports: dict[tuple[str, str], AttackReport]
    cross_table: dict[str, dict[str, float]]
    clean_acc: dict[str, float]
    max_min: tuple[str, float]
    train_log: TrainLog | None
    out_dir: Path


def _fmt(x: float) -> str:
    return format(x, ".17g")


def _apply_sources(cfg: ExperimentConfig, n_final: int) -> tuple[list[GradientSource], dict]:
    """Cross-table attack columns before intermediate-index selection."""
    g = cfg.grid
    columns: list[GradientSource] = []
    pending: dict[str, GradientSource] = {}
    if g.include_exact_final:
        columns.append(GradientSource.exact_final())
    if "adjoint" in g.families:
        columns.append(GradientSource.adjoint_intermediate(n=n_final, beta=g.beta))
        pending["adjoint"] = GradientSource.adjoint_intermediate(n=1, beta=g.beta)
        columns.append(GradientSource.adjoint_ensemble(beta=g.beta))
    if "unrolled" in g.families:
        columns.append(GradientSource.phantom_final(k=g.k, damping=g.damping))
        pending["unrolled"] = GradientSource.unrolled_intermediate(n=1, k=g.k, damping=g.damping)
        columns.append(GradientSource.unrolled_ensemble(k=g.k, damping=g.damping))
    return columns, pending


def _prepare_model(
    cfg: ExperimentConfig, data: Dataset, scfg: SolverConfig, bcfg: BackwardConfig
) -> tuple[LayerParams, TrainLog | None]:
    if cfg.checkpoint:
        p, _ = model.load_checkpoint(cfg.checkpoint)
        return p, None
    dims = ModelDims(d=cfg.d, l=data.n_features, c=data.n_classes)
    init_rng = numkit.make_rng(numkit.derived_seed(cfg.seed, "init"))
    p0 = model.init_params(dims, cfg.activation, init_rng)
    tcfg = replace(cfg.train, seed=numkit.derived_seed(cfg.seed, "train"))
    return training.train(p0, data, tcfg, scfg, bcfg)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Train (or load), calibrate, run the source x defense grid, write reports."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scfg, bcfg = cfg.solver, cfg.backward

    data = gen_synthetic(
        cfg.data.kind, cfg.data.n, cfg.data.noise, cfg.data.l,
        seed=numkit.derived_seed(cfg.seed, "data"),
        test_frac=cfg.data.test_frac, dev_frac=cfg.data.dev_frac,
    )
    p, train_log = _prepare_model(cfg, data, scfg, bcfg)
    if train_log is not None:
        train_log.write_csv(out / "trainlog.csv")
    X_dev, y_dev = data.split("dev")
    X_test, y_test = data.split("test")

    # calibrate the early exit once on the dev set, then freeze it
    n_star: int | None = None
    if "early" in cfg.grid.defenses:
        n_star = defenses.calibrate_early_exit(
            p, X_dev, y_dev, cfg.train.attack, scfg, bcfg,
            rng=numkit.make_rng(numkit.derived_seed(cfg.seed, "calibrate")),
        )
    model.save_checkpoint(
        p, out / "checkpoint.json",
        defense={"kind": "early", "n_star": n_star} if n_star is not None else None,
    )

    strategies = []
    for kind in cfg.grid.defenses:
        if kind == "early":
            strategies.append(DefenseStrategy.early(n_star))
        else:
            strategies.append(DefenseStrategy(kind=kind))

    n_final = scfg.max_iters
    candidates = list(cfg.grid.intermediate_candidates) or list(range(1, n_final)) or [n_final]
    columns, pending = _apply_sources(cfg, n_final)

    # pick each family's intermediate index by worst-case damage on the
    # early defense (fall back to the first configured defense)
    probe_defense = next(
        (s for s in strategies if s.kind == "early"), strategies[0]
    )
    chosen: dict[str, int] = {}
    for family, template in pending.items():
        best_n, best_acc = None, None
        for n in candidates:
            src = template.with_n(n)
            rep = attacks.evaluate_robustness(
                p, X_test, y_test, cfg.attack.with_source(src), probe_defense,
                scfg, bcfg, rng=cell_rng(cfg.seed, "probe:" + probe_defense.describe(), src.describe()),
            )
            if best_acc is None or rep.robust_accuracy < best_acc:
                best_n, best_acc = n, rep.robust_accuracy
        chosen[family] = best_n
        columns.append(template.with_n(best_n))
    # keep column order stable: exact, adjoint(final/int/ens), unrolled(...)
    columns = _ordered_columns(columns)

    reports: dict[tuple[str, str], AttackReport] = {}
    cross: dict[str, dict[str, float]] = {}
    clean_acc: dict[str, float] = {}
    for strat in strategies:
        row: dict[str, float] = {}
        for src in columns:
            rep = attacks.evaluate_robustness(
                p, X_test, y_test, cfg.attack.with_source(src), strat, scfg, bcfg,
                rng=cell_rng(cfg.seed, strat.describe(), src.describe()),
            )
            reports[(strat.describe(), src.describe())] = rep
            row[src.describe()] = rep.robust_accuracy
            clean_acc[strat.describe()] = rep.clean_accuracy
        cross[strat.describe()] = row

    # max-min robustness: worst attack per defense, best defense overall
    minima = {d: min(row.values()) for d, row in cross.items()}
    best_defense = max(sorted(minima), key=lambda d: minima[d])
    max_min = (best_defense, minima[best_defense])

    _write_cross_table(out / "cross_table.csv", cross, clean_acc, columns)
    attacks.write_reports_csv(list(reports.values()), out / "reports.csv")
    per_state = attacks.per_state_robustness(
        p, X_test, y_test, cfg.train.attack, scfg, bcfg,
        rng=numkit.make_rng(numkit.derived_seed(cfg.seed, "per_state")),
    )
    clean_state = attacks.per_state_robustness(
        p, X_test, y_test, replace(cfg.train.attack, epsilon=0.0), scfg, bcfg,
    )
    _write_per_state(out / "per_state.csv", per_state, clean_state)
    _write_rel_error(out / "rel_error.csv", p, X_test, scfg)
    if cfg.grid.run_ablations:
        _write_ablations(out, cfg, p, data, candidates, scfg, bcfg, probe_defense)

    summary = {
        "clean_accuracy": clean_acc,
        "cross_table": cross,
        "minima": minima,
        "max_min": {"defense": best_defense, "robust_accuracy": minima[best_defense]},
        "early_exit_n_star": n_star,
        "chosen_intermediate": chosen,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2), encoding="utf-8"
    )
    print(f"max-min robustness: defense={best_defense} robust_accuracy={minima[best_defense]:.4f}")
    return ExperimentResult(
        config=cfg, dataset=data, params=p, n_star=n_star, chosen_intermediate=chosen,
        reports=reports, cross_table=cross, clean_acc=clean_acc, max_min=max_min,
        train_log=train_log, out_dir=out,
    )


def _ordered_columns(columns: list[GradientSource]) -> list[GradientSource]:
    rank = {
        "exact_final": 0,
        "adjoint_intermediate": 1,
        "adjoint_ensemble": 2,
        "phantom_final": 3,
        "unrolled_intermediate": 4,
        "unrolled_ensemble": 5,
    }
    ordered = sorted(columns, key=lambda s: (rank[s.kind], s.n if s.n is not None else -1))
    seen: set[str] = set()
    unique = []
    for src in ordered:
        if src.describe() not in seen:
            seen.add(src.describe())
            unique.append(src)
    return unique


def _write_cross_table(path: Path, cross: dict, clean_acc: dict, columns) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        names = [c.describe() for c in columns]
        writer.writerow(["defense", "clean"] + names)
        for defense, row in cross.items():
            writer.writerow(
                [defense, _fmt(clean_acc[defense])] + [_fmt(row[n]) for n in names]
            )


def _write_per_state(path: Path, robust: np.ndarray, clean: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state", "clean_accuracy", "robust_accuracy"])
        for n, (c, r) in enumerate(zip(clean, robust)):
            label = str(n) if n < len(clean) - 1 else "extended"
            writer.writerow([label, _fmt(c), _fmt(r)])


def _write_rel_error(path: Path, p: LayerParams, X: np.ndarray, scfg: SolverConfig) -> None:
    sums = np.zeros(scfg.max_iters + 1)
    count = 0
    for x in X:
        try:
            trace = solver.solve(p, x, scfg)
        except solver.SolverDivergence:
            continue
        sums += np.asarray(trace.rel_errors)
        count += 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state", "mean_rel_error"])
        if count:
            for n, v in enumerate(sums / count):
                writer.writerow([n, _fmt(v)])


def _write_ablations(
    out: Path, cfg: ExperimentConfig, p: LayerParams, data: Dataset,
    candidates: list[int], scfg: SolverConfig, bcfg: BackwardConfig,
    probe_defense: DefenseStrategy,
) -> None:
    """Sweeps over unroll start n, steps k, damping and adjoint beta."""
    X_test, y_test = data.split("test")
    limit = cfg.grid.ablation_examples
    if limit and limit < len(X_test):
        X_test, y_test = X_test[:limit], y_test[:limit]
    g = cfg.grid
    with open(out / "ablation_unrolled.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "k", "lam", "defense", "robust_accuracy"])
        for n in candidates:
            for k in g.ablation_ks:
                for lam in g.ablation_damping:
                    src = GradientSource.unrolled_intermediate(n=n, k=k, damping=lam)
                    rep = attacks.evaluate_robustness(
                        p, X_test, y_test, cfg.attack.with_source(src), probe_defense,
                        scfg, bcfg, rng=cell_rng(cfg.seed, "ablation", src.describe()),
                    )
                    writer.writerow([n, k, _fmt(lam), probe_defense.describe(),
                                     _fmt(rep.robust_accuracy)])
    with open(out / "ablation_adjoint.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "beta", "defense", "robust_accuracy"])
        for n in candidates + [scfg.max_iters]:
            for beta in g.ablation_betas:
                src = GradientSource.adjoint_intermediate(n=n, beta=beta)
                rep = attacks.evaluate_robustness(
                    p, X_test, y_test, cfg.attack.with_source(src), probe_defense,
                    scfg, bcfg, rng=cell_rng(cfg.seed, "ablation", src.describe()),
                )
                writer.writerow([n, _fmt(beta), probe_defense.describe(),
                                 _fmt(rep.robust_accuracy)])
