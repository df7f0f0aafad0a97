"""Training strategies: single-environment, multi-environment (shared phi,
one head per environment), transfer by fine-tuning or gradual unfreezing,
and k-fold cross-validation.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import objectives as O
from . import tensor as T
from .channel import EnvironmentDataset, check_compatible
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "MSE"
    max_epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    min_delta: float = 1e-3
    unfreeze_lr_factor: float = 0.1
    val_fraction: float = 0.1  # held out when no validation set is supplied
    seed: int = 0

    def __post_init__(self):
        if self.loss not in M.MODES:
            raise ValueError(f"loss must be one of {M.MODES}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.unfreeze_lr_factor <= 1:
            raise ValueError("unfreeze_lr_factor must be in (0, 1]")
        if self.min_delta < 0:
            raise ValueError("min_delta must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass(frozen=True)
class CurveRecord:
    epoch: int
    train_loss: float
    val_loss: float
    phase: str
    lr: float
    env: int = -1  # -1: summed over environments


class PlateauDetector:
    """Signals a plateau after ``patience`` consecutive epochs without a
    relative improvement larger than ``min_delta`` over the best value seen."""

    def __init__(self, patience: int = 10, min_delta: float = 1e-3):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.stale = 0

    def improved(self, value: float) -> bool:
        if not math.isfinite(self.best):
            return True
        return self.best - value > self.min_delta * max(abs(self.best), 1e-12)

    def update(self, value: float) -> bool:
        if self.improved(value):
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class MemlResult:
    phi: dict[str, np.ndarray]
    heads: list[dict[str, np.ndarray]]
    mode: str
    curves: list[CurveRecord] = field(default_factory=list)
    arch: M.Architecture = field(default_factory=M.Architecture)

    @property
    def n_environments(self) -> int:
        return len(self.heads)

    def model(self, n: int) -> M.TwoPartModel:
        return M.TwoPartModel(self.mode, self.phi, self.heads[n], self.arch)


@dataclass
class FoldReport:
    folds: list[dict[str, float]]
    k: int
    assignment: list[np.ndarray]

    @property
    def mean(self) -> dict[str, float]:
        keys = [k for k in self.folds[0] if all(f.get(k) is not None for f in self.folds)]
        return {k: float(np.mean([f[k] for f in self.folds])) for k in keys}


# loss on the tape -------------------------------------------------------------------

def _loss_graph(raw: Tensor, mode: str, targets: np.ndarray) -> Tensor:
    mu, logvar = M.split_output(raw, mode)
    if mode == "MSE":
        return O.mse_graph(mu, targets)
    return O.nll_graph(mu, logvar, targets)


def batch_loss(model: M.TwoPartModel, H: np.ndarray, targets: np.ndarray):
    """Taped loss of ``model`` on one batch. Returns ``(loss, tensor_params)``."""
    raw, tp = M.build_graph(model, H)
    return _loss_graph(raw, model.mode, targets), tp


def evaluate_loss(model: M.TwoPartModel, H: np.ndarray, targets: np.ndarray, batch_size: int = 256,
                  features: np.ndarray | None = None) -> float:
    """Mean loss over a dataset, evaluated in chunks without taping."""
    total = 0.0
    n = targets.shape[0]
    with T.no_grad():
        for i in range(0, n, batch_size):
            sl = slice(i, i + batch_size)
            if features is None:
                raw = M.build_graph(model, H[sl], False, False)[0]
            else:
                raw = M.head_graph(Tensor(features[sl]), M._wrap(model.head, "head", False))
            total += float(_loss_graph(raw, model.mode, targets[sl]).data) * targets[sl].shape[0]
    return total / n


# core loop --------------------------------------------------------------------------

@dataclass
class _Env:
    H: np.ndarray
    Y: np.ndarray
    H_val: np.ndarray | None
    Y_val: np.ndarray | None
    z: np.ndarray | None = None  # cached features while phi is frozen
    z_val: np.ndarray | None = None


def _split(ds: EnvironmentDataset, frac: float, rng: np.random.Generator):
    n = len(ds)
    n_val = int(round(frac * n)) if n > 1 else 0
    if frac > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    perm = rng.permutation(n)
    return ds.subset(np.sort(perm[n_val:])), (ds.subset(np.sort(perm[:n_val])) if n_val else None)


def _prepare(train: Sequence[EnvironmentDataset], val: Sequence[EnvironmentDataset | None] | None,
             config: TrainConfig) -> list[_Env]:
    envs = []
    for n, ds in enumerate(train):
        if len(ds) == 0:
            raise ValueError(f"environment {n}: empty training set")
        v = val[n] if val is not None else None
        if v is None and val is None and config.val_fraction > 0:
            ds, v = _split(ds, config.val_fraction, np.random.default_rng([config.seed, 7, n]))
        envs.append(_Env(ds.H, ds.targets(), None if v is None else v.H, None if v is None else v.targets()))
    return envs


def _snapshot(phi, heads):
    return {k: v.copy() for k, v in phi.items()}, [{k: v.copy() for k, v in h.items()} for h in heads]


def _restore(phi, heads, snap):
    sphi, sheads = snap
    for k in phi:
        phi[k][...] = sphi[k]
    for h, sh in zip(heads, sheads):
        for k in h:
            h[k][...] = sh[k]


def _fit(phi: dict, heads: list[dict], mode: str, arch: M.Architecture, envs: list[_Env],
         config: TrainConfig, lr: float, freeze_phi: bool, phase: str, epoch0: int,
         curves: list[CurveRecord], best: dict) -> int:
    """Train to plateau (or ``max_epochs``). Updates ``best`` in place; returns epochs run."""
    models = [M.TwoPartModel(mode, phi, h, arch) for h in heads]
    opt = Adam(lr=lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    frozen = {f"phi.{k}" for k in phi} if freeze_phi else set()
    if freeze_phi:
        for e in envs:
            e.z = M.forward_features(models[0], e.H) if len(e.H) else None
            e.z_val = M.forward_features(models[0], e.H_val) if e.H_val is not None else None
    plateau = PlateauDetector(config.patience, config.min_delta)
    bs = config.batch_size
    n_steps = max(math.ceil(len(e.Y) / bs) for e in envs)
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch0 + epoch])
        perms = [np.resize(rng.permutation(len(e.Y)), n_steps * bs) for e in envs]
        train_sum = 0.0
        for step in range(n_steps):
            phi_grad: dict[str, np.ndarray] = {}
            grads: dict[str, np.ndarray] = {}
            for n, (e, mdl) in enumerate(zip(envs, models)):
                idx = perms[n][step * bs:(step + 1) * bs]
                if freeze_phi:
                    tp = M._wrap(mdl.head, "head", True)
                    raw = M.head_graph(Tensor(e.z[idx]), tp)
                    loss = _loss_graph(raw, mode, e.Y[idx])
                else:
                    loss, tp = batch_loss(mdl, e.H[idx], e.Y[idx])
                lv = float(loss.data)
                if not math.isfinite(lv):
                    raise TrainingDivergedError(
                        f"non-finite {mode} loss at phase={phase} epoch={epoch} step={step} env={n}")
                train_sum += lv
                g = T.grad(loss, tp)
                for k, v in g.items():
                    if k.startswith("phi."):
                        if k in phi_grad:
                            phi_grad[k] += v
                        else:
                            phi_grad[k] = v
                    else:
                        grads[f"head{n}.{k[5:]}"] = v
            params = {f"head{n}.{k}": v for n, h in enumerate(heads) for k, v in h.items()}
            if not freeze_phi:
                params.update({k: phi[k[4:]] for k in phi_grad})
                grads.update(phi_grad)
            opt.step(params, grads, frozen)
        train_loss = train_sum / n_steps
        if all(e.Y_val is not None for e in envs):
            val_loss = sum(evaluate_loss(mdl, e.H_val, e.Y_val, features=e.z_val if freeze_phi else None)
                           for e, mdl in zip(envs, models))
        else:
            val_loss = sum(evaluate_loss(mdl, e.H, e.Y, features=e.z if freeze_phi else None)
                           for e, mdl in zip(envs, models))
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at phase={phase} epoch={epoch}")
        curves.append(CurveRecord(epoch0 + epoch, train_loss, val_loss, phase, lr))
        if val_loss < best["loss"]:
            best["loss"] = val_loss
            best["snap"] = _snapshot(phi, heads)
        if plateau.update(val_loss):
            break
    for e in envs:
        e.z = e.z_val = None
    return epoch


def _run(phi, heads, mode, arch, train, val, config: TrainConfig, freeze_phi=False, phase="train"):
    envs = _prepare(train, val, config)
    curves: list[CurveRecord] = []
    best = {"loss": math.inf, "snap": None}
    _fit(phi, heads, mode, arch, envs, config, config.lr, freeze_phi, phase, 0, curves, best)
    if best["snap"] is not None:
        _restore(phi, heads, best["snap"])
    return curves


def train_single(model: M.TwoPartModel, dataset: EnvironmentDataset, config: TrainConfig,
                 val: EnvironmentDataset | None = None):
    """Train a copy of ``model`` on one environment; returns ``(model, curves)``.

    Without ``val``, ``config.val_fraction`` of the data is held out for
    checkpoint selection and plateau detection. This is exactly
    ``train_meml`` with a single environment.
    """
    if model.mode != config.loss:
        raise ValueError(f"model mode {model.mode} does not match loss {config.loss}")
    out = model.copy()
    curves = _run(out.phi, [out.head], out.mode, out.arch, [dataset], None if val is None else [val], config)
    return out, curves


def train_meml(datasets: Sequence[EnvironmentDataset], config: TrainConfig,
               arch: M.Architecture = M.Architecture(), val: Sequence[EnvironmentDataset] | None = None,
               init_seed: int | None = None) -> MemlResult:
    """Joint training of one shared phi and one head per environment.

    Every step takes one equally sized minibatch per environment and
    minimises the sum of the per-environment losses. Head ``n`` only ever
    sees environment ``n``'s loss.
    """
    if len(datasets) < 1:
        raise ValueError("need at least one environment")
    shape = check_compatible(datasets)
    if shape != arch.input_shape:
        raise T.ShapeError("train_meml(input)", shape, arch.input_shape)
    seed = config.seed if init_seed is None else init_seed
    base = M.init_model(config.loss, seed, arch)
    phi = base.phi
    heads = [base.head] + [M.init_head(config.loss, seed * 1000 + n, arch) for n in range(1, len(datasets))]
    curves = _run(phi, heads, config.loss, arch, list(datasets), val, config, phase="source")
    return MemlResult(phi, heads, config.loss, curves, arch)


def meml_gradients(phi, heads, mode, arch, batches) -> list[dict[str, np.ndarray]]:
    """Per-environment gradients of each environment's batch loss w.r.t. all parameters.

    ``batches`` is a list of ``(H, targets)``. Entry ``m`` maps ``phi.*`` and
    ``head{n}.*`` names to the gradient of environment ``m``'s loss; heads
    of other environments get zeros since they are not on its tape.
    """
    out = []
    for m_idx, (H, Y) in enumerate(batches):
        x = Tensor(M.to_channels_first(np.asarray(H, dtype=np.float64)))
        tp = M._wrap(phi, "phi", True)
        head_tp = [M._wrap(h, "head", True) for h in heads]
        z = M.phi_graph(M.TwoPartModel(mode, phi, heads[m_idx], arch), x, tp)
        raw = M.head_graph(z, head_tp[m_idx])
        loss = _loss_graph(raw, mode, Y)
        named = dict(tp)
        for n, htp in enumerate(head_tp):
            named.update({f"head{n}.{k[5:]}": t for k, t in htp.items()})
        out.append(T.grad(loss, named))
    return out


# transfer --------------------------------------------------------------------------------

def _target_model(theta_init: dict[str, np.ndarray], config: TrainConfig, arch: M.Architecture) -> M.TwoPartModel:
    ref = M.init_phi(0, arch)
    if set(theta_init) != set(ref):
        raise ValueError(f"phi blocks {sorted(theta_init)} != {sorted(ref)}")
    for k, v in ref.items():
        if theta_init[k].shape != v.shape:
            raise T.ShapeError(f"transfer(phi.{k})", theta_init[k].shape, v.shape)
    return M.TwoPartModel(config.loss, {k: np.array(v, copy=True) for k, v in theta_init.items()},
                          M.init_head(config.loss, config.seed, arch), arch, config.seed)


def transfer_finetune(theta_init: dict[str, np.ndarray], target: EnvironmentDataset, config: TrainConfig,
                      val: EnvironmentDataset | None = None, arch: M.Architecture = M.Architecture()):
    """phi from ``theta_init``, fresh random head, everything trained jointly.

    Returns ``(model, curves)``.
    """
    if len(target) == 0:
        raise ValueError("empty target dataset")
    mdl = _target_model(theta_init, config, arch)
    curves = _run(mdl.phi, [mdl.head], mdl.mode, arch, [target], None if val is None else [val], config,
                  phase="finetune")
    return mdl, curves


def transfer_gradual_unfreeze(theta_init: dict[str, np.ndarray], target: EnvironmentDataset,
                              config: TrainConfig, val: EnvironmentDataset | None = None,
                              arch: M.Architecture = M.Architecture(), phase1_hook: Callable | None = None):
    """Two phases: head only with phi frozen until plateau, then everything with
    the learning rate scaled by ``unfreeze_lr_factor`` until the next plateau.

    Phase 2 starts from the best phase-1 checkpoint; the best checkpoint
    over both phases is returned as ``(model, curves)``. ``phase1_hook`` is
    called with the model between the phases.
    """
    if len(target) == 0:
        raise ValueError("empty target dataset")
    mdl = _target_model(theta_init, config, arch)
    envs = _prepare([target], None if val is None else [val], config)
    curves: list[CurveRecord] = []
    best = {"loss": math.inf, "snap": None}
    n1 = _fit(mdl.phi, [mdl.head], mdl.mode, arch, envs, config, config.lr, True, "frozen", 0, curves, best)
    if best["snap"] is not None:
        _restore(mdl.phi, [mdl.head], best["snap"])
    if phase1_hook is not None:
        phase1_hook(mdl)
    _fit(mdl.phi, [mdl.head], mdl.mode, arch, envs, config, config.lr * config.unfreeze_lr_factor, False,
         "unfrozen", n1, curves, best)
    if best["snap"] is not None:
        _restore(mdl.phi, [mdl.head], best["snap"])
    return mdl, curves


# cross-validation ------------------------------------------------------------------------

def sample_keys(dataset: EnvironmentDataset) -> list[bytes]:
    """Content hash of each (fingerprint, position) pair; identifies samples regardless of order."""
    return [hashlib.blake2b(dataset.positions[i].tobytes() + dataset.H[i].tobytes(), digest_size=16).digest()
            for i in range(len(dataset))]


def fold_assignment(dataset: EnvironmentDataset, k: int, seed: int) -> list[np.ndarray]:
    """Indices of each validation fold.

    Samples are put in content-hash order, shuffled with ``seed`` and sliced
    into ``k`` near-equal folds, so membership follows sample identity and
    not dataset order.
    """
    n = len(dataset)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    keys = sample_keys(dataset)
    canonical = np.array(sorted(range(n), key=lambda i: keys[i]), dtype=np.int64)
    shuffled = canonical[np.random.default_rng(seed).permutation(n)]
    return [np.sort(part) for part in np.array_split(shuffled, k)]


def kfold_cv(dataset: EnvironmentDataset, k: int,
             trainer: Callable[[EnvironmentDataset, EnvironmentDataset, int], dict[str, float]],
             seed: int = 0) -> FoldReport:
    """Run ``trainer(train, val, fold_index)`` on each of ``k`` folds and average its metrics."""
    folds = fold_assignment(dataset, k, seed)
    n = len(dataset)
    results = []
    for i, val_idx in enumerate(folds):
        mask = np.ones(n, dtype=bool)
        mask[val_idx] = False
        results.append(dict(trainer(dataset.subset(np.flatnonzero(mask)), dataset.subset(val_idx), i)))
    return FoldReport(results, k, folds)


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=int(seed))
