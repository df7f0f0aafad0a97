"""Two-part positioning network.

The feature extractor (``phi``) is two pooling blocks, each a valid 3x3
convolution, ReLU and max-pool, followed by a flatten and a dense layer to 128
features. The environment head is two 128->128 dense layers and an output layer
with 2 (MSE) or 4 (NLL: x, y, log-variance x, log-variance y) units.

All parameters live in plain numpy arrays keyed by block name; the forward pass
wraps them in tensors so gradients come back under the same names.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MODES = ("MSE", "NLL")
FEATURE_DIM = 128
LOGVAR_CLAMP = 10.0

PHI_BLOCKS = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc.w", "fc.b")
HEAD_BLOCKS = ("h1.w", "h1.b", "h2.w", "h2.b", "out.w", "out.b")


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, int, int] = (8, 103, 2)
    channels: tuple[int, int] = (16, 32)
    kernel: tuple[int, int] = (3, 3)
    pools: tuple[tuple[int, int], tuple[int, int]] = ((2, 4), (1, 4))
    feature_dim: int = FEATURE_DIM
    head_hidden: tuple[int, int] = (128, 128)

    def flat_dim(self) -> int:
        h, w, _ = self.input_shape
        kh, kw = self.kernel
        for ph, pw in self.pools:
            h, w = h - kh + 1, w - kw + 1
            if h < ph or w < pw:
                raise ValueError(f"input {self.input_shape} too small for the pooling blocks")
            h, w = h // ph, w // pw
        return h * w * self.channels[-1]


def output_dim(mode: str) -> int:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return 2 if mode == "MSE" else 4


@dataclass
class UncertainPrediction:
    """Positions (and per-axis standard deviations in NLL mode), shape ``(M, 2)``."""

    position: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        if self.sigma is not None and not np.all(self.sigma > 0):
            raise ValueError("sigma must be positive")

    def __len__(self):
        return len(self.position)


@dataclass
class TwoPartModel:
    mode: str
    phi: dict[str, np.ndarray]
    head: dict[str, np.ndarray]
    arch: Architecture = field(default_factory=Architecture)
    seed: int = 0

    def params(self) -> dict[str, np.ndarray]:
        out = {f"phi.{k}": v for k, v in self.phi.items()}
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def copy(self) -> "TwoPartModel":
        return TwoPartModel(self.mode, {k: v.copy() for k, v in self.phi.items()},
                            {k: v.copy() for k, v in self.head.items()}, self.arch, self.seed)

    def load_params(self, params: dict[str, np.ndarray]):
        """Overwrite parameter values in place from a ``params()``-style dict."""
        for k, v in params.items():
            part, name = k.split(".", 1)
            target = self.phi if part == "phi" else self.head
            target[name][...] = v


def _dense(rng, fan_in, fan_out, gain=2.0):
    w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
    return w, np.zeros(fan_out)


def init_phi(seed: int, arch: Architecture = Architecture()) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([int(seed), 0])
    kh, kw = arch.kernel
    c0 = arch.input_shape[2]
    c1, c2 = arch.channels
    p = {}
    p["conv1.w"] = rng.standard_normal((c1, c0, kh, kw)) * np.sqrt(2.0 / (kh * kw * c0))
    p["conv1.b"] = np.zeros(c1)
    p["conv2.w"] = rng.standard_normal((c2, c1, kh, kw)) * np.sqrt(2.0 / (kh * kw * c1))
    p["conv2.b"] = np.zeros(c2)
    p["fc.w"], p["fc.b"] = _dense(rng, arch.flat_dim(), arch.feature_dim)
    return p


def init_head(mode: str, seed: int, arch: Architecture = Architecture()) -> dict[str, np.ndarray]:
    out = output_dim(mode)
    rng = np.random.default_rng([int(seed), 1])
    h1, h2 = arch.head_hidden
    p = {}
    p["h1.w"], p["h1.b"] = _dense(rng, arch.feature_dim, h1)
    p["h2.w"], p["h2.b"] = _dense(rng, h1, h2)
    p["out.w"], p["out.b"] = _dense(rng, h2, out, gain=1.0)
    return p


def init_model(mode: str, seed: int, arch: Architecture = Architecture()) -> TwoPartModel:
    output_dim(mode)
    return TwoPartModel(mode, init_phi(seed, arch), init_head(mode, seed, arch), arch, int(seed))


def _wrap(params: dict[str, np.ndarray], prefix: str, trainable: bool) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": Tensor(v, requires_grad=trainable) for k, v in params.items()}


def _check_input(model: TwoPartModel, H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    expected = model.arch.input_shape
    if H.ndim == 3:
        H = H[None]
    if H.shape[1:] != expected:
        raise ShapeError("forward_features", H.shape[1:], expected)
    return H


def to_channels_first(H: np.ndarray) -> np.ndarray:
    """``(M, N_R, N_C, 2)`` fingerprints -> ``(M, 2, N_R, N_C)`` conv input."""
    return np.ascontiguousarray(H.transpose(0, 3, 1, 2))


def phi_graph(model: TwoPartModel, x: Tensor, tp: dict[str, Tensor], signature: list | None = None) -> Tensor:
    # max-pool commutes with a per-channel bias and with relu, so each block is
    # evaluated as conv -> pool -> bias -> relu: same function, far fewer elementwise ops
    h = x
    for i, pool in enumerate(model.arch.pools, start=1):
        c = T.conv2d(h, tp[f"phi.conv{i}.w"])
        if signature is not None:
            signature.append(T.pool_argmax(c.data, pool))
        a = T.add_bias(T.maxpool2d(c, pool), tp[f"phi.conv{i}.b"], axis=1)
        if signature is not None:
            signature.append(a.data > 0)
        h = T.relu(a)
    h = T.reshape(h, (h.shape[0], -1))
    a = T.add_bias(T.matmul(h, tp["phi.fc.w"]), tp["phi.fc.b"])
    if signature is not None:
        signature.append(a.data > 0)
    return T.relu(a)


def head_graph(z: Tensor, tp: dict[str, Tensor], signature: list | None = None) -> Tensor:
    """Raw head outputs (positions, plus unclamped log-variances in NLL mode)."""
    h = z
    for name in ("h1", "h2"):
        a = T.add_bias(T.matmul(h, tp[f"head.{name}.w"]), tp[f"head.{name}.b"])
        if signature is not None:
            signature.append(a.data > 0)
        h = T.relu(a)
    return T.add_bias(T.matmul(h, tp["head.out.w"]), tp["head.out.b"])


def build_graph(model: TwoPartModel, H: np.ndarray, trainable_phi: bool = True,
                trainable_head: bool = True, signature: list | None = None):
    """Forward pass on the tape. Returns ``(raw_output, tensor_params)``."""
    x = Tensor(to_channels_first(_check_input(model, H)))
    tp = _wrap(model.phi, "phi", trainable_phi)
    tp.update(_wrap(model.head, "head", trainable_head))
    z = phi_graph(model, x, tp, signature)
    return head_graph(z, tp, signature), tp


def split_output(raw: Tensor, mode: str) -> tuple[Tensor, Tensor | None]:
    """Split raw outputs into ``(mu, clamped log-variance)``."""
    if mode == "MSE":
        return raw, None
    return raw[:, 0:2], T.clip(raw[:, 2:4], -LOGVAR_CLAMP, LOGVAR_CLAMP)


def forward_features(model: TwoPartModel, H: np.ndarray) -> np.ndarray:
    """Feature vectors ``z``: shape ``(128,)`` for one fingerprint, ``(M, 128)`` for a batch."""
    single = np.asarray(H).ndim == 3
    with T.no_grad():
        tp = _wrap(model.phi, "phi", False)
        z = phi_graph(model, Tensor(to_channels_first(_check_input(model, H))), tp).data
    return z[0] if single else z


def forward_head(model: TwoPartModel, z: np.ndarray) -> UncertainPrediction:
    """Head outputs in normalised coordinates; sigma = exp(s/2), s clamped to +-10."""
    z = np.asarray(z, dtype=np.float64)
    z2 = z[None] if z.ndim == 1 else z
    if z2.shape[1] != model.arch.feature_dim:
        raise ShapeError("forward_head", z2.shape, (model.arch.feature_dim,))
    with T.no_grad():
        raw = head_graph(Tensor(z2), _wrap(model.head, "head", False)).data
    return raw_to_prediction(raw, model.mode)


def raw_to_prediction(raw: np.ndarray, mode: str) -> UncertainPrediction:
    if mode == "MSE":
        return UncertainPrediction(raw[:, :2].copy())
    s = np.clip(raw[:, 2:4], -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return UncertainPrediction(raw[:, :2].copy(), np.exp(s / 2.0))


def predict(model: TwoPartModel, H: np.ndarray, normalizer=None, batch_size: int = 256) -> UncertainPrediction:
    """Predictions for a batch of fingerprints, in meters when a normalizer is given."""
    H = _check_input(model, H)
    raws = []
    with T.no_grad():
        for i in range(0, H.shape[0], batch_size):
            raws.append(build_graph(model, H[i:i + batch_size], False, False)[0].data)
    pred = raw_to_prediction(np.concatenate(raws), model.mode)
    if normalizer is None:
        return pred
    pos = normalizer.inverse(pred.position)
    sigma = None if pred.sigma is None else pred.sigma * np.asarray(normalizer.scale)
    return UncertainPrediction(pos, sigma)


def count_params(model: TwoPartModel, part: str = "total") -> int:
    if part == "phi":
        return int(sum(v.size for v in model.phi.values()))
    if part == "head":
        return int(sum(v.size for v in model.head.values()))
    if part == "total":
        return count_params(model, "phi") + count_params(model, "head")
    raise ValueError(f"part must be 'phi', 'head' or 'total', got {part!r}")


def swap_head(model: TwoPartModel, new_head: dict[str, np.ndarray]) -> TwoPartModel:
    """A new model with a copy of ``model``'s phi and the given head.

    The head's output width decides the mode (2 -> MSE, 4 -> NLL).
    """
    if set(new_head) != set(HEAD_BLOCKS):
        raise ValueError(f"head blocks {sorted(new_head)} != {sorted(HEAD_BLOCKS)}")
    n_out = new_head["out.w"].shape[1]
    if n_out not in (2, 4):
        raise ShapeError("swap_head(output width)", new_head["out.w"].shape, (model.arch.head_hidden[1], "2|4"))
    ref = init_head("MSE" if n_out == 2 else "NLL", 0, model.arch)
    for k, v in ref.items():
        if new_head[k].shape != v.shape:
            raise ShapeError(f"swap_head({k})", new_head[k].shape, v.shape)
    mode = "MSE" if n_out == 2 else "NLL"
    return TwoPartModel(mode, {k: v.copy() for k, v in model.phi.items()},
                        {k: np.array(v, dtype=np.float64, copy=True) for k, v in new_head.items()},
                        model.arch, model.seed)
