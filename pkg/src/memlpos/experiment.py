"""Experiment configuration, the transfer option matrix, sample-fraction
sweeps and the two-model CRPS toy study.

One experiment fixes a strategy (scratch, DTL or MEML), a source loss, a
target loss and a target training mode, then loops over target
environments, sample fractions, seeds and cross-validation folds. Every
fold is scored on a test split that does not depend on the fraction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterator

import numpy as np

from . import model as M
from . import objectives as O
from . import training as TR
from .channel import EnvironmentDataset, EnvironmentSpec, build_environment, generate_dataset
from .training import TrainConfig

log = logging.getLogger(__name__)

STRATEGIES = ("scratch", "DTL", "MEML")
SOURCE_LOSSES = ("MSE", "NLL", "none")
TARGET_MODES = ("finetune", "gradual")
DEFAULT_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


class ConfigError(ValueError):
    pass


# scenario ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvDef:
    spec: EnvironmentSpec
    seed: int


def _box(x0, x1, y0, y1):
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


def default_sources() -> tuple[EnvDef, ...]:
    # the array is wall-mounted at mid-edge on each side of the room, each room
    # with its own scatterers and a pillar or partition wall
    pillar = _box(4.5, 5.5, 4.5, 5.5)
    return (
        EnvDef(EnvironmentSpec(bs_position=(4.0, -1.5, 2.8), blockers=(pillar,)), 100),
        EnvDef(EnvironmentSpec(bs_position=(11.5, 6.0, 2.6), blockers=(pillar,)), 101),
        EnvDef(EnvironmentSpec(bs_position=(6.0, 11.5, 3.0), blockers=(pillar,)), 102),
        EnvDef(EnvironmentSpec(bs_position=(-1.5, 4.0, 2.7), blockers=(pillar,)), 103),
    )


def default_targets() -> tuple[tuple[str, EnvDef], ...]:
    return (
        ("LOS", EnvDef(EnvironmentSpec(bs_position=(5.0, -1.5, 2.5)), 200)),
        ("NLOS", EnvDef(EnvironmentSpec(bs_position=(-1.5, 5.0, 2.5), blockers=(_box(3.0, 3.3, 3.0, 7.0),)), 300)),
    )


@dataclass(frozen=True)
class Scenario:
    """Source and target environments plus dataset sizes."""

    sources: tuple[EnvDef, ...] = field(default_factory=default_sources)
    targets: tuple[tuple[str, EnvDef], ...] = field(default_factory=default_targets)
    noise_std: float = 0.005
    n_source_samples: int = 2000
    n_target_train: int = 1000
    n_target_val: int = 250
    n_target_test: int = 500
    data_seed: int = 0

    def __post_init__(self):
        for name in ("n_source_samples", "n_target_train", "n_target_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_target_val < 0 or self.noise_std < 0:
            raise ConfigError("n_target_val and noise_std must be >= 0")
        labels = [t for t, _ in self.targets]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate target labels {labels}")

    @property
    def n_pool(self) -> int:
        return self.n_target_train + self.n_target_val

    def target(self, env_type: str) -> EnvDef:
        for label, d in self.targets:
            if label == env_type:
                return d
        raise ConfigError(f"no target environment {env_type!r}; have {[t for t, _ in self.targets]}")


# configuration -----------------------------------------------------------------------

def _default_source_train() -> TrainConfig:
    return TrainConfig(loss="NLL", max_epochs=80, patience=8)


def _default_target_train() -> TrainConfig:
    return TrainConfig(lr=5e-3, unfreeze_lr_factor=0.3)


def _default_target_train_nll() -> TrainConfig:
    # the NLL head is less stable than the MSE head at the higher rate
    return TrainConfig(loss="NLL", lr=3e-3, unfreeze_lr_factor=0.5)


def _target_config(mse: TrainConfig, nll: TrainConfig, loss: str) -> TrainConfig:
    return replace(nll if loss == "NLL" else mse, loss=loss)


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str = "MEML"
    source_loss: str = "NLL"
    target_loss: str = "MSE"
    target_mode: str = "finetune"
    n_sources: int | None = None  # None: 1 for DTL, every scenario source for MEML
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    seeds: tuple[int, ...] = (0, 1, 2)
    env_types: tuple[str, ...] = ("LOS", "NLOS")
    folds: int = 5
    scenario: Scenario = field(default_factory=Scenario)
    source_train: TrainConfig = field(default_factory=_default_source_train)
    target_train: TrainConfig = field(default_factory=_default_target_train)
    target_train_nll: TrainConfig = field(default_factory=_default_target_train_nll)
    source_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.source_loss not in SOURCE_LOSSES:
            raise ConfigError(f"source_loss must be one of {SOURCE_LOSSES}, got {self.source_loss!r}")
        if self.target_loss not in M.MODES:
            raise ConfigError(f"target_loss must be one of {M.MODES}, got {self.target_loss!r}")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if (self.strategy == "scratch") != (self.source_loss == "none"):
            raise ConfigError("source_loss is 'none' exactly when strategy is 'scratch'")
        if self.strategy == "scratch" and self.target_mode != "finetune":
            raise ConfigError("scratch training has no source features to freeze")
        n = self.resolved_sources
        if self.strategy == "DTL" and n != 1:
            raise ConfigError("DTL uses exactly one source environment")
        if self.strategy == "MEML" and not 1 <= n <= len(self.scenario.sources):
            raise ConfigError(f"MEML needs 1..{len(self.scenario.sources)} sources, got {n}")
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError(f"fractions must be in (0, 1], got {self.fractions}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        for t in self.env_types:
            self.scenario.target(t)

    @property
    def resolved_sources(self) -> int:
        if self.strategy == "scratch":
            return 0
        if self.n_sources is not None:
            return self.n_sources
        return 1 if self.strategy == "DTL" else len(self.scenario.sources)

    @property
    def label(self) -> str:
        """Value of the ``strategy`` results column; gradual unfreezing gets a ``/gu`` suffix."""
        return self.strategy if self.target_mode == "finetune" else f"{self.strategy}/gu"

    def target_config(self, loss: str) -> TrainConfig:
        """Target training settings for ``loss``: ``target_train_nll`` for NLL, else ``target_train``."""
        return _target_config(self.target_train, self.target_train_nll, loss)


def parse_strategy(label: str) -> tuple[str, str]:
    """``"MEML/gu"`` -> ``("MEML", "gradual")``."""
    base, _, suffix = label.partition("/")
    if base not in STRATEGIES or suffix not in ("", "gu"):
        raise ConfigError(f"unknown strategy {label!r}")
    return base, ("gradual" if suffix else "finetune")


@dataclass(frozen=True)
class SweepConfig:
    """Cartesian product of strategy labels, source losses and target losses.

    ``scratch`` is run once per target loss (it has no source loss).
    """

    strategies: tuple[str, ...] = ("scratch", "DTL", "DTL/gu", "MEML", "MEML/gu")
    source_losses: tuple[str, ...] = ("MSE", "NLL")
    target_losses: tuple[str, ...] = ("MSE", "NLL")
    env_types: tuple[str, ...] = ("LOS", "NLOS")
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    seeds: tuple[int, ...] = (0, 1, 2)
    folds: int = 5
    n_sources: int | None = None
    scenario: Scenario = field(default_factory=Scenario)
    source_train: TrainConfig = field(default_factory=_default_source_train)
    target_train: TrainConfig = field(default_factory=_default_target_train)
    target_train_nll: TrainConfig = field(default_factory=_default_target_train_nll)
    source_seed: int = 0

    def __post_init__(self):
        if not self.strategies or not self.target_losses:
            raise ConfigError("strategies and target_losses must not be empty")
        for s in self.strategies:
            parse_strategy(s)
        list(self.experiments())  # validates every cell

    def target_config(self, loss: str) -> TrainConfig:
        return _target_config(self.target_train, self.target_train_nll, loss)

    def experiments(self) -> Iterator[ExperimentConfig]:
        shared = dict(fractions=tuple(self.fractions), seeds=tuple(self.seeds), env_types=tuple(self.env_types),
                      folds=self.folds, scenario=self.scenario, source_train=self.source_train,
                      target_train=self.target_train, target_train_nll=self.target_train_nll,
                      source_seed=self.source_seed)
        for label in self.strategies:
            strategy, mode = parse_strategy(label)
            src_losses = ("none",) if strategy == "scratch" else self.source_losses
            n_src = None if strategy != "MEML" else self.n_sources
            for src in src_losses:
                for tgt in self.target_losses:
                    yield ExperimentConfig(strategy, src, tgt, mode, n_src, **shared)


# results ----------------------------------------------------------------------------------

CSV_COLUMNS = ("strategy", "source_loss", "target_loss", "env_type", "fraction", "seed", "fold", "me_m", "crps")


@dataclass(frozen=True)
class ResultRow:
    strategy: str
    source_loss: str
    target_loss: str
    env_type: str
    fraction: float
    seed: int
    fold: int
    me_m: float
    crps: float | None = None

    def __post_init__(self):
        if (self.crps is not None) != (self.target_loss == "NLL"):
            raise ValueError("crps is present exactly when the target loss is NLL")


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)
    pool_sizes: dict[float, int] = field(default_factory=dict)  # fraction -> target samples (train + val)
    test_indices: dict[str, np.ndarray] = field(default_factory=dict)  # env type -> pool-relative test indices
    source_curves: dict[str, list[TR.CurveRecord]] = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def extend(self, other: "ResultsTable"):
        self.rows.extend(other.rows)
        self.pool_sizes.update(other.pool_sizes)
        self.test_indices.update(other.test_indices)
        self.source_curves.update(other.source_curves)

    def select(self, **match) -> list[ResultRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def mean(self, metric: str = "me_m", **match) -> float:
        vals = [getattr(r, metric) for r in self.select(**match)]
        if not vals or any(v is None for v in vals):
            raise KeyError(f"no {metric} values for {match}")
        return float(np.mean(vals))


# running -------------------------------------------------------------------------------------

class Workspace:
    """Cache of generated datasets and trained source models shared by the
    experiments of one sweep."""

    def __init__(self):
        self.datasets: dict[tuple, EnvironmentDataset] = {}
        self.sources: dict[tuple, TR.MemlResult] = {}

    def source_datasets(self, scenario: Scenario, n: int) -> list[EnvironmentDataset]:
        out = []
        for i, d in enumerate(scenario.sources[:n]):
            key = ("source", i, d, scenario.n_source_samples, scenario.noise_std, scenario.data_seed)
            if key not in self.datasets:
                env = build_environment(d.spec, d.seed, env_id=i)
                self.datasets[key] = generate_dataset(env, scenario.n_source_samples, scenario.noise_std,
                                                      seed=scenario.data_seed * 100 + i, name=f"source{i}")
            out.append(self.datasets[key])
        return out

    def target_dataset(self, scenario: Scenario, env_type: str) -> EnvironmentDataset:
        idx = [t for t, _ in scenario.targets].index(env_type)
        d = scenario.target(env_type)
        n = scenario.n_pool + scenario.n_target_test
        key = ("target", env_type, d, n, scenario.noise_std, scenario.data_seed)
        if key not in self.datasets:
            env = build_environment(d.spec, d.seed, env_id=len(scenario.sources) + idx)
            self.datasets[key] = generate_dataset(env, n, scenario.noise_std, seed=scenario.data_seed * 100 + 50 + idx,
                                                  name=f"target_{env_type}")
        return self.datasets[key]

    def source_model(self, config: ExperimentConfig) -> tuple[str, TR.MemlResult]:
        n = config.resolved_sources
        key = (config.strategy, config.source_loss, n, config.scenario, config.source_train, config.source_seed)
        name = f"{config.strategy}:{config.source_loss}:{n}"
        if key not in self.sources:
            data = self.source_datasets(config.scenario, n)
            cfg = replace(config.source_train, loss=config.source_loss, seed=config.source_seed)
            log.info("training %s source model on %d environment(s)", name, n)
            self.sources[key] = TR.train_meml(data, cfg)
        return name, self.sources[key]


def pool_size(scenario: Scenario, fraction: float) -> int:
    return max(1, int(round(fraction * scenario.n_pool)))


def split_target(scenario: Scenario, dataset: EnvironmentDataset, fraction: float):
    """``(pool subset for this fraction, test set)``.

    Positions are drawn i.i.d., so a prefix of the pool is a uniform subset;
    the test split is the tail of the dataset whatever the fraction.
    """
    pool = dataset.subset(np.arange(pool_size(scenario, fraction)))
    test = dataset.subset(np.arange(scenario.n_pool, scenario.n_pool + scenario.n_target_test))
    return pool, test


def fold_seed(seed: int, fold: int) -> int:
    return int(seed) * 1000 + int(fold)


def train_target(config: ExperimentConfig, theta: dict | None, train: EnvironmentDataset,
                 val: EnvironmentDataset, seed: int) -> M.TwoPartModel:
    cfg = replace(config.target_config(config.target_loss), seed=seed)
    if config.strategy == "scratch":
        return TR.transfer_finetune(M.init_phi(seed), train, cfg, val)[0]
    if config.target_mode == "gradual":
        return TR.transfer_gradual_unfreeze(theta, train, cfg, val)[0]
    return TR.transfer_finetune(theta, train, cfg, val)[0]


def run_experiment(config: ExperimentConfig, workspace: Workspace | None = None,
                   on_row: Callable[[ResultRow], None] | None = None) -> ResultsTable:
    """Source phase (unless scratch), then k-fold target training and test scoring
    for every (env type, fraction, seed). ``on_row`` sees each row as it completes."""
    ws = workspace or Workspace()
    table = ResultsTable()
    theta = None
    if config.strategy != "scratch":
        name, src = ws.source_model(config)
        theta = src.phi
        table.source_curves[name] = list(src.curves)
    sc = config.scenario
    for env_type in config.env_types:
        data = ws.target_dataset(sc, env_type)
        table.test_indices[env_type] = np.arange(sc.n_pool, sc.n_pool + sc.n_target_test)
        for fraction in config.fractions:
            pool, test = split_target(sc, data, fraction)
            table.pool_sizes[float(fraction)] = len(pool)
            if len(pool) < config.folds:
                raise ConfigError(f"fraction {fraction} leaves {len(pool)} samples for {config.folds} folds")
            for seed in config.seeds:
                for fold, val_idx in enumerate(TR.fold_assignment(pool, config.folds, seed)):
                    mask = np.ones(len(pool), dtype=bool)
                    mask[val_idx] = False
                    mdl = train_target(config, theta, pool.subset(np.flatnonzero(mask)), pool.subset(val_idx),
                                       fold_seed(seed, fold))
                    rep = O.score_testset(M.predict(mdl, test.H, test.normalizer), test.positions,
                                          crps=config.target_loss == "NLL")
                    row = ResultRow(config.label, config.source_loss, config.target_loss, env_type, float(fraction),
                                    int(seed), fold, rep.mean_error, rep.crps)
                    table.rows.append(row)
                    if on_row is not None:
                        on_row(row)
                    log.info("%s %s->%s %s f=%.2f seed=%d fold=%d ME=%.3f", row.strategy, row.source_loss,
                             row.target_loss, env_type, fraction, seed, fold, row.me_m)
    return table


def run_sweep(sweep: SweepConfig, workspace: Workspace | None = None,
              on_row: Callable[[ResultRow], None] | None = None) -> ResultsTable:
    ws = workspace or Workspace()
    table = ResultsTable()
    for cfg in sweep.experiments():
        table.extend(run_experiment(cfg, ws, on_row))
    return table


# JSON configuration ------------------------------------------------------------------------------

def _train_config(d: dict, base: TrainConfig) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    bad = set(d) - names
    if bad:
        raise ConfigError(f"unknown training keys {sorted(bad)}")
    try:
        return replace(base, **d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _env_def(d: dict) -> EnvDef:
    allowed = {"seed", "bs_position", "bs_yaw", "blockers", "n_scatterers", "area", "ue_height",
               "scatterer_margin", "scatterer_gain"}
    bad = set(d) - allowed
    if bad:
        raise ConfigError(f"unknown environment keys {sorted(bad)}")
    kw = {k: v for k, v in d.items() if k != "seed"}
    for k in ("bs_position", "area", "scatterer_gain"):
        if k in kw:
            kw[k] = tuple(float(x) for x in kw[k])
    if "blockers" in kw:
        kw["blockers"] = tuple(tuple((float(x), float(y)) for x, y in poly) for poly in kw["blockers"])
    try:
        return EnvDef(EnvironmentSpec(**kw), int(d.get("seed", 0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _scenario(d: dict) -> Scenario:
    simple = {"noise_std", "n_source_samples", "n_target_train", "n_target_val", "n_target_test", "data_seed"}
    bad = set(d) - simple - {"sources", "targets"}
    if bad:
        raise ConfigError(f"unknown scenario keys {sorted(bad)}")
    kw = {k: d[k] for k in simple if k in d}
    if "sources" in d:
        kw["sources"] = tuple(_env_def(s) for s in d["sources"])
    if "targets" in d:
        kw["targets"] = tuple((t["type"], _env_def({k: v for k, v in t.items() if k != "type"})) for t in d["targets"])
    return Scenario(**kw)


TRAIN_DEFAULTS = {"source_train": _default_source_train, "target_train": _default_target_train,
                  "target_train_nll": _default_target_train_nll}


def sweep_from_dict(d: dict, seeds: tuple[int, ...] | None = None) -> SweepConfig:
    """Build a sweep from parsed JSON. Keys mirror ``SweepConfig`` field names;
    ``source_train``, ``target_train`` and ``target_train_nll`` hold training-config overrides."""
    names = {f.name for f in fields(SweepConfig)}
    bad = set(d) - names
    if bad:
        raise ConfigError(f"unknown config keys {sorted(bad)}")
    kw = {}
    for k, v in d.items():
        if k == "scenario":
            kw[k] = _scenario(v)
        elif k in TRAIN_DEFAULTS:
            kw[k] = _train_config(v, TRAIN_DEFAULTS[k]())
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    if seeds is not None:
        kw["seeds"] = tuple(seeds)
    try:
        return SweepConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def sweep_to_dict(sweep: SweepConfig) -> dict:
    """JSON-friendly form of ``sweep`` (the inverse of ``sweep_from_dict``)."""
    out = asdict(sweep)
    sc = out.pop("scenario")
    out["scenario"] = {k: v for k, v in sc.items() if k not in ("sources", "targets")}

    def env(d: EnvDef) -> dict:
        s = d.spec
        return {"seed": d.seed, "bs_position": list(s.bs_position), "bs_yaw": s.bs_yaw,
                "blockers": [list(map(list, p)) for p in s.blockers], "n_scatterers": s.n_scatterers,
                "area": list(s.area), "ue_height": s.ue_height, "scatterer_margin": s.scatterer_margin,
                "scatterer_gain": list(s.scatterer_gain)}

    out["scenario"]["sources"] = [env(d) for d in sweep.scenario.sources]
    out["scenario"]["targets"] = [dict(type=t, **env(d)) for t, d in sweep.scenario.targets]
    return out


# toy CRPS study ----------------------------------------------------------------------------------

# CRPS / sigma of N(mu, sigma^2): at y = mu it is (sqrt 2 - 1)/sqrt(pi); averaged over y ~ N(mu, sigma^2)
# (a calibrated forecast) it is E|X - Y| - E|X - X'|/2 = 1/sqrt(pi)
CRPS_AT_MEAN = (math.sqrt(2.0) - 1.0) / math.sqrt(math.pi)
CALIBRATED_CRPS = 1.0 / math.sqrt(math.pi)
TOY_VARIANCES = {"M1": 0.1, "M2": 2.0}


def _paired_check(name: str, smaller: np.ndarray, larger: np.ndarray, z_min: float) -> dict:
    d = larger - smaller
    se = float(d.std(ddof=1) / math.sqrt(d.size))
    diff = float(d.mean())
    return {"name": name, "difference": diff, "se": se, "z": diff / se, "passed": bool(diff >= z_min * se)}


def toy_crps_experiment(n_draws: int = 100_000, seed: int = 0, z_min: float = 5.0) -> dict:
    """Two models that add isotropic Gaussian noise (variances 0.1 and 2) to the
    true position, each scored with both candidate reported covariances.

    Every ordering is checked on per-draw paired differences and must hold by
    ``z_min`` Monte-Carlo standard errors.
    """
    if n_draws < 10_000:
        raise ValueError("n_draws must be >= 10000")
    rng = np.random.default_rng(seed)
    truth = rng.uniform(0.0, 10.0, (n_draws, 2))
    preds = {m: truth + rng.normal(0.0, math.sqrt(v), (n_draws, 2)) for m, v in TOY_VARIANCES.items()}
    err = {m: np.hypot(*(p - truth).T) for m, p in preds.items()}
    crps = {}
    for m, p in preds.items():
        for s, v in TOY_VARIANCES.items():
            sig = np.full_like(p, math.sqrt(v))
            crps[(m, s)] = O.crps_gaussian(p, sig, truth).mean(axis=1)
    best = {m: min(("M1", "M2"), key=lambda s: crps[(m, s)].mean()) for m in preds}
    checks = [
        _paired_check("ME(M1) < ME(M2)", err["M1"], err["M2"], z_min),
        _paired_check("CRPS(M1,S1) < CRPS(M1,S2)", crps[("M1", "M1")], crps[("M1", "M2")], z_min),
        _paired_check("CRPS(M2,S2) < CRPS(M2,S1)", crps[("M2", "M2")], crps[("M2", "M1")], z_min),
        _paired_check("best CRPS(M1) < best CRPS(M2)", crps[("M1", best["M1"])], crps[("M2", best["M2"])], z_min),
    ]
    calibration = []
    for m, v in TOY_VARIANCES.items():
        per_coord = O.crps_gaussian(preds[m], np.full_like(preds[m], math.sqrt(v)), truth).ravel()
        expected = CALIBRATED_CRPS * math.sqrt(v)
        se = float(per_coord.std(ddof=1) / math.sqrt(per_coord.size))
        mean = float(per_coord.mean())
        calibration.append({"model": m, "sigma": math.sqrt(v), "mean": mean, "expected": expected, "se": se,
                            "z": (mean - expected) / se, "passed": bool(abs(mean - expected) <= 3 * se),
                            "at_mean": CRPS_AT_MEAN * math.sqrt(v)})
    return {
        "n_draws": n_draws,
        "seed": seed,
        "variances": TOY_VARIANCES,
        "me": {m: float(e.mean()) for m, e in err.items()},
        "crps": {f"{m},S{s[1]}": float(c.mean()) for (m, s), c in crps.items()},
        "best_reported": {m: f"S{s[1]}" for m, s in best.items()},
        "checks": checks,
        "calibration": calibration,
        "passed": all(c["passed"] for c in checks + calibration),
    }
