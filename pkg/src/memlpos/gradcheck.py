"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np


def relative_error(g_ad, g_fd):
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    return np.abs(g_ad - g_fd) / np.maximum(1e-12, np.abs(g_ad) + np.abs(g_fd))


def grad_check(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    detect_kinks: bool = False,
) -> dict[str, float]:
    """Worst relative error between ``analytic`` and central differences.

    ``loss_fn`` re-evaluates the loss from the current contents of ``params``
    (entries are perturbed in place and restored). With ``max_entries`` set,
    that many entries per block are sampled with ``rng``; otherwise every
    entry is checked.

    With ``detect_kinks`` the loss function must return ``(value, signature)``
    where the signature describes the piecewise-linear regime (relu masks,
    pooling argmaxes). Entries whose perturbation changes the signature sit
    on a kink; they are excluded and another entry is drawn in their place.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng or np.random.default_rng(0)

    def evaluate():
        out = loss_fn()
        return out if detect_kinks else (out, None)

    base_sig = evaluate()[1]
    worst: dict[str, float] = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        g_flat = np.asarray(analytic[name]).reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            candidates = list(range(flat.size))
            want = flat.size
        else:
            candidates = list(rng.permutation(flat.size))
            want = max_entries
        errs = []
        for idx in candidates:
            if len(errs) >= want:
                break
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus, sig_plus = evaluate()
            flat[idx] = orig - step
            f_minus, sig_minus = evaluate()
            kink = detect_kinks and not (_same(sig_plus, base_sig) and _same(sig_minus, base_sig))
            flat[idx] = orig
            if kink:
                continue
            g_fd = (f_plus - f_minus) / (2.0 * step)
            errs.append(float(relative_error(g_flat[idx], g_fd)))
        worst[name] = max(errs) if errs else 0.0
    return worst


def _same(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return bool(np.array_equal(a, b))


def check_model(mode: str, seed: int, batch: int = 3, max_entries: int | None = 8, step: float = 1e-5) -> float:
    """Worst relative error of the full two-part network's gradient in ``mode``.

    Inputs and targets are random; ``max_entries`` entries per block are
    sampled, skipping any that sit on a relu or max-pool kink.
    """
    from . import model as M
    from . import tensor as T
    from .training import _loss_graph

    rng = np.random.default_rng([int(seed), 99])
    mdl = M.init_model(mode, seed)
    H = rng.standard_normal((batch,) + mdl.arch.input_shape)
    Y = rng.uniform(0.0, 1.0, (batch, 2))
    raw, tp = M.build_graph(mdl, H)
    analytic = T.grad(_loss_graph(raw, mode, Y), tp)

    def loss_fn():
        sig: list = []
        with T.no_grad():
            out, _ = M.build_graph(mdl, H, False, False, signature=sig)
            value = float(_loss_graph(out, mode, Y).data)
        return value, sig

    worst = grad_check(loss_fn, mdl.params(), analytic, step=step, max_entries=max_entries, rng=rng,
                       detect_kinks=True)
    return max(worst.values())
