"""On-disk formats for datasets and model checkpoints.

Dataset directory::

    manifest.json   metadata (UTF-8 JSON)
    H.bin           [sample][antenna][subcarrier][re, im], little-endian float64
    p.bin           [sample][x, y] in meters, little-endian float64

Checkpoint directory::

    manifest.json   mode, architecture, seed, ordered block list
    params.bin      every block in declared order, row-major little-endian float64
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import model as M
from .channel import EnvironmentDataset, PositionNormalizer

FORMAT_VERSION = 1
DTYPE = "f64le"
_LE = np.dtype("<f8")


class FormatError(ValueError):
    """Malformed dataset or checkpoint on disk."""


class VersionMismatchError(FormatError):
    def __init__(self, path, found):
        self.found = found
        super().__init__(f"{path}: format_version {found!r}, expected {FORMAT_VERSION}")


class SizeMismatchError(FormatError):
    def __init__(self, path, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{path}: expected {expected} bytes, found {actual}")


def _read_manifest(directory: Path) -> dict:
    path = directory / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"{path}: missing manifest") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(path, manifest.get("format_version"))
    if manifest.get("dtype", DTYPE) != DTYPE:
        raise FormatError(f"{path}: unsupported dtype {manifest.get('dtype')!r}")
    return manifest


def _read_blob(path: Path, count: int) -> np.ndarray:
    raw = path.read_bytes()
    expected = count * _LE.itemsize
    if len(raw) != expected:
        raise SizeMismatchError(path, expected, len(raw))
    return np.frombuffer(raw, dtype=_LE).astype(np.float64)


def write_dataset(dataset: EnvironmentDataset, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    n, n_rx, n_subc, _ = dataset.H.shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": dataset.name,
        "env_id": int(dataset.env_id),
        "env_type": dataset.env_type,
        "n_samples": int(n),
        "n_rx": int(n_rx),
        "n_subc": int(n_subc),
        "dtype": DTYPE,
        "normalizer": {"offset": list(dataset.normalizer.offset), "scale": list(dataset.normalizer.scale)},
        "csi_scale": float(dataset.csi_scale),
        "noise_seed_base": int(dataset.noise_seed),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (out / "H.bin").write_bytes(np.ascontiguousarray(dataset.H, dtype=_LE).tobytes())
    (out / "p.bin").write_bytes(np.ascontiguousarray(dataset.positions, dtype=_LE).tobytes())
    return out


def read_dataset(path) -> EnvironmentDataset:
    src = Path(path)
    m = _read_manifest(src)
    try:
        n, n_rx, n_subc = int(m["n_samples"]), int(m["n_rx"]), int(m["n_subc"])
        norm = PositionNormalizer(tuple(m["normalizer"]["offset"]), tuple(m["normalizer"]["scale"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{src / 'manifest.json'}: bad field ({exc})") from None
    if n <= 0:
        raise FormatError(f"{src / 'manifest.json'}: n_samples must be positive, got {n}")
    H = _read_blob(src / "H.bin", n * n_rx * n_subc * 2).reshape(n, n_rx, n_subc, 2)
    p = _read_blob(src / "p.bin", n * 2).reshape(n, 2)
    return EnvironmentDataset(int(m.get("env_id", 0)), H, p, norm, m.get("name", ""),
                              int(m.get("noise_seed_base", 0)), float(m.get("csi_scale", 1.0)),
                              m.get("env_type", "LOS"))


def save_checkpoint(model: M.TwoPartModel, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    params = model.params()
    arch = model.arch
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": DTYPE,
        "mode": model.mode,
        "seed": int(model.seed),
        "arch": {
            "input_shape": list(arch.input_shape),
            "channels": list(arch.channels),
            "kernel": list(arch.kernel),
            "pools": [list(p) for p in arch.pools],
            "feature_dim": arch.feature_dim,
            "head_hidden": list(arch.head_hidden),
        },
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype=_LE).tobytes() for v in params.values())
    (out / "params.bin").write_bytes(blob)
    return out


def load_checkpoint(path) -> M.TwoPartModel:
    src = Path(path)
    m = _read_manifest(src)
    a = m["arch"]
    arch = M.Architecture(tuple(a["input_shape"]), tuple(a["channels"]), tuple(a["kernel"]),
                          tuple(tuple(p) for p in a["pools"]), int(a["feature_dim"]), tuple(a["head_hidden"]))
    sizes = [int(np.prod(b["shape"])) for b in m["blocks"]]
    flat = _read_blob(src / "params.bin", sum(sizes))
    phi, head = {}, {}
    offset = 0
    for b, size in zip(m["blocks"], sizes):
        part, name = b["name"].split(".", 1)
        arr = flat[offset:offset + size].reshape(b["shape"]).copy()
        offset += size
        (phi if part == "phi" else head)[name] = arr
    return M.TwoPartModel(m["mode"], phi, head, arch, int(m.get("seed", 0)))
