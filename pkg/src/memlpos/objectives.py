"""Training losses, positioning error and CRPS."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.stats import norm

from . import tensor as T
from .tensor import Tensor

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


@dataclass
class LossValue:
    loss: float
    loss_x: np.ndarray  # per-sample x contribution
    loss_y: np.ndarray
    log_term: np.ndarray | None = None  # per-sample log(sigma_x sigma_y), NLL only


@dataclass
class ScoreReport:
    mean_error: float
    crps: float | None
    crps_sum: float | None
    errors: np.ndarray  # (M,) euclidean distances, meters
    crps_xy: np.ndarray | None  # (M, 2) per-coordinate CRPS


def _unpack(preds, sigma=None):
    if hasattr(preds, "position"):
        return np.asarray(preds.position, dtype=np.float64), (preds.sigma if sigma is None else sigma)
    return np.asarray(preds, dtype=np.float64), sigma


def _paired(preds, truths):
    truths = np.asarray(truths, dtype=np.float64)
    if preds.ndim == 1:
        preds, truths = preds[None], truths.reshape(1, -1)
    if preds.shape != truths.shape or preds.shape[-1] != 2:
        raise ValueError(f"predictions {preds.shape} and truths {truths.shape} must both be (M, 2)")
    if preds.shape[0] == 0:
        raise ValueError("empty batch")
    return preds, truths


def mse_loss(preds, truths) -> LossValue:
    """Mean squared x error plus mean squared y error."""
    p, _ = _unpack(preds)
    p, t = _paired(p, truths)
    e2 = (p - t) ** 2
    return LossValue(float(e2[:, 0].mean() + e2[:, 1].mean()), e2[:, 0], e2[:, 1])


def nll_loss(preds, truths, sigma=None) -> LossValue:
    """Batch mean of ``e_x^2/(2 s_x^2) + e_y^2/(2 s_y^2) + log(s_x s_y)``."""
    p, s = _unpack(preds, sigma)
    p, t = _paired(p, truths)
    if s is None:
        raise ValueError("nll_loss needs per-sample sigma")
    s = np.asarray(s, dtype=np.float64).reshape(p.shape)
    if np.any(s <= 0):
        raise ValueError("sigma must be positive")
    e2 = (p - t) ** 2
    lx = e2[:, 0] / (2.0 * s[:, 0] ** 2)
    ly = e2[:, 1] / (2.0 * s[:, 1] ** 2)
    lg = np.log(s[:, 0] * s[:, 1])
    return LossValue(float(np.mean(lx + ly + lg)), lx, ly, lg)


def mse_graph(mu: Tensor, targets: np.ndarray) -> Tensor:
    """Taped MSE loss on normalised coordinates."""
    d = T.sub(mu, Tensor(targets))
    return T.scale(T.sum_(T.square(d)), 1.0 / mu.shape[0])


def nll_graph(mu: Tensor, logvar: Tensor, targets: np.ndarray) -> Tensor:
    """Taped NLL with ``logvar = log sigma^2`` (so ``log(s_x s_y) = (lv_x + lv_y) / 2``)."""
    e2 = T.square(T.sub(mu, Tensor(targets)))
    per_entry = T.add(T.mul(e2, T.exp(T.scale(logvar, -1.0))), logvar)
    return T.scale(T.sum_(per_entry), 0.5 / mu.shape[0])


def mean_error(preds, truths) -> float:
    p, _ = _unpack(preds)
    p, t = _paired(p, truths)
    return float(np.mean(np.hypot(p[:, 0] - t[:, 0], p[:, 1] - t[:, 1])))


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of ``N(mu, sigma^2)`` against observation ``y``."""
    mu, sigma, y = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (mu, sigma, y)))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    w = (y - mu) / sigma
    out = sigma * (w * (2.0 * norm.cdf(w) - 1.0) + 2.0 * norm.pdf(w) - INV_SQRT_PI)
    return float(out) if out.ndim == 0 else out


def gaussian_cdf(mu: float, sigma: float) -> Callable[[float], float]:
    """Scalar CDF of ``N(mu, sigma^2)``, cheap enough to call inside quadrature."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = 1.0 / (sigma * math.sqrt(2.0))
    return lambda x: 0.5 * math.erfc((mu - x) * k)


class QuadratureError(RuntimeError):
    pass


def crps_numeric(cdf: Callable[[float], float], y: float, lower: float, upper: float,
                 tol: float = 1e-9, points=()) -> float:
    """``integral (F(x) - 1[x >= y])^2 dx`` over ``[lower, upper]`` by adaptive quadrature.

    The integrand jumps at ``y``, so the range is split there. Extra
    ``points`` (e.g. the location of a sharp CDF) are passed to the
    integrator as break points.
    """
    if not lower <= y <= upper:
        raise ValueError(f"bounds [{lower}, {upper}] must cover y={y}")
    total = 0.0
    pieces = ((lower, y, lambda x: cdf(x) ** 2), (y, upper, lambda x: (1.0 - cdf(x)) ** 2))
    for a, b, f in pieces:
        if b <= a:
            continue
        brk = [q for q in points if a < q < b] or None
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, err = integrate.quad(f, a, b, points=brk, epsabs=tol, epsrel=0.0, limit=500)
            except integrate.IntegrationWarning as exc:
                raise QuadratureError(f"quadrature did not converge on [{a}, {b}]: {exc}") from None
        if err > tol:
            raise QuadratureError(f"quadrature error estimate {err:.3g} exceeds tolerance {tol:.3g}")
        total += val
    return total


def score_testset(predictions, truths, crps: bool | None = None) -> ScoreReport:
    """Mean error and, when sigmas are available (or ``crps=True``), CRPS.

    ``crps`` is the mean over samples of the x/y-averaged per-coordinate
    CRPS; ``crps_sum`` sums the two coordinates instead.
    """
    p, s = _unpack(predictions)
    p, t = _paired(p, truths)
    errors = np.hypot(p[:, 0] - t[:, 0], p[:, 1] - t[:, 1])
    want = (s is not None) if crps is None else crps
    if not want:
        return ScoreReport(float(errors.mean()), None, None, errors, None)
    if s is None:
        raise ValueError("CRPS requested but predictions carry no sigma")
    cxy = crps_gaussian(p, np.asarray(s).reshape(p.shape), t)
    return ScoreReport(float(errors.mean()), float(cxy.mean(axis=1).mean()), float(cxy.sum(axis=1).mean()),
                       errors, cxy)
