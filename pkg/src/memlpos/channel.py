"""Synthetic multi-environment CSI fingerprints.

Each environment is a base station with a 4x2 uniform rectangular array,
a set of point scatterers and optional blocking polygons. The uplink channel
to a single-antenna UE is the sum of a line-of-sight path (unless blocked)
and one single-bounce path per visible scatterer, evaluated on a comb of
pilot subcarriers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ArrayConfig:
    n_rows: int = 4
    n_cols: int = 2
    spacing: float = 0.5  # wavelengths
    carrier_hz: float = 1.272e9
    n_subcarriers: int = 103
    pilot_spacing_hz: float = 10 * 50e6 / 1024  # every tenth of 1024 subcarriers in 50 MHz

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("array needs at least one row and one column")
        if self.n_subcarriers < 1:
            raise ValueError("n_subcarriers must be positive")
        if self.spacing <= 0 or self.carrier_hz <= 0 or self.pilot_spacing_hz <= 0:
            raise ValueError("spacing, carrier and pilot spacing must be positive")

    @property
    def n_antennas(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    def subcarrier_offsets(self) -> np.ndarray:
        """Pilot frequencies relative to the carrier, centred on zero."""
        n = np.arange(self.n_subcarriers, dtype=np.float64)
        return (n - (self.n_subcarriers - 1) / 2.0) * self.pilot_spacing_hz

    def element_positions(self) -> np.ndarray:
        """Element coordinates in wavelengths, array frame ``(boresight, row, col)``.

        Antenna ``k = r * n_cols + c`` sits at ``(0, r*d, c*d)``; element 0 is the
        phase reference.
        """
        r, c = np.meshgrid(np.arange(self.n_rows), np.arange(self.n_cols), indexing="ij")
        pos = np.zeros((self.n_antennas, 3))
        pos[:, 1] = r.reshape(-1) * self.spacing
        pos[:, 2] = c.reshape(-1) * self.spacing
        return pos


def direction_vector(azimuth: float, elevation: float) -> np.ndarray:
    """Unit vector pointing from the array towards the source (array frame)."""
    ce = math.cos(elevation)
    return np.array([ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)])


def array_response(config: ArrayConfig, azimuth: float, elevation: float) -> np.ndarray:
    """Plane-wave steering vector of the URA.

    Azimuth is measured from boresight towards the row axis, elevation from
    the horizontal plane towards the column axis, both in radians.
    """
    if not (-math.pi <= azimuth <= math.pi) or not (-math.pi / 2 <= elevation <= math.pi / 2):
        raise ValueError(f"angles out of range: azimuth={azimuth}, elevation={elevation}")
    proj = config.element_positions() @ direction_vector(azimuth, elevation)
    return np.exp(2j * np.pi * proj)


# geometry ---------------------------------------------------------------------------

def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p) -> bool:
    return min(a[0], b[0]) <= p[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])


def segments_intersect(p1, p2, q1, q2) -> bool:
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and d1 != 0 and d2 != 0 and ((d3 > 0) != (d4 > 0)) and d3 != 0 and d4 != 0:
        return True
    return ((d1 == 0 and _on_segment(q1, q2, p1)) or (d2 == 0 and _on_segment(q1, q2, p2))
            or (d3 == 0 and _on_segment(p1, p2, q1)) or (d4 == 0 and _on_segment(p1, p2, q2)))


def point_in_polygon(p, poly) -> bool:
    inside = False
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if (a[1] > p[1]) != (b[1] > p[1]):
            x_cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if p[0] < x_cross:
                inside = not inside
    return inside


def segment_hits_polygon(a, b, poly) -> bool:
    """True if the closed segment ``a-b`` touches or enters the polygon."""
    if point_in_polygon(a, poly) or point_in_polygon(b, poly):
        return True
    n = len(poly)
    return any(segments_intersect(a, b, poly[i], poly[(i + 1) % n]) for i in range(n))


# environments -----------------------------------------------------------------------

@dataclass(frozen=True)
class EnvironmentSpec:
    """Geometry parameters from which an environment is drawn."""

    area: tuple[float, float, float, float] = (0.0, 10.0, 0.0, 10.0)  # xmin, xmax, ymin, ymax
    bs_position: tuple[float, float, float] = (-1.0, -1.0, 3.0)
    bs_yaw: float | None = None  # boresight azimuth (rad); None points at the area centre
    ue_height: float = 1.0
    n_scatterers: int = 8
    scatterer_margin: float = 4.0
    scatterer_gain: tuple[float, float] = (0.2, 0.6)
    blockers: tuple[tuple[tuple[float, float], ...], ...] = ()
    array: ArrayConfig = field(default_factory=ArrayConfig)

    @property
    def env_type(self) -> str:
        return "NLOS" if self.blockers else "LOS"


@dataclass(frozen=True)
class Environment:
    env_id: int
    spec: EnvironmentSpec
    bs_position: np.ndarray
    bs_yaw: float
    scatterers: np.ndarray  # (S, 3)
    scatterer_gains: np.ndarray  # (S,) complex
    seed: int

    @property
    def array(self) -> ArrayConfig:
        return self.spec.array

    @property
    def area(self):
        return self.spec.area

    @property
    def blockers(self):
        return self.spec.blockers

    def contains(self, position) -> bool:
        xmin, xmax, ymin, ymax = self.area
        return xmin <= position[0] <= xmax and ymin <= position[1] <= ymax

    def is_nlos(self, position) -> bool:
        """Whether the direct BS-UE path crosses a blocker (horizontal projection)."""
        return self._blocked(self.bs_position[:2], np.asarray(position, dtype=np.float64)[:2])

    def _blocked(self, a, b) -> bool:
        return any(segment_hits_polygon(a, b, poly) for poly in self.blockers)

    def to_local(self, vec: np.ndarray) -> tuple[float, float]:
        """Azimuth/elevation of a global direction in the array frame."""
        c, s = math.cos(self.bs_yaw), math.sin(self.bs_yaw)
        x = c * vec[0] + s * vec[1]
        y = -s * vec[0] + c * vec[1]
        z = vec[2]
        az = math.atan2(y, x)
        el = math.atan2(z, math.hypot(x, y))
        return az, el

    def paths(self, position) -> list[tuple[complex, float, float, float]]:
        """Propagation paths as ``(amplitude, delay_s, azimuth, elevation)``."""
        ue = np.array([position[0], position[1], self.spec.ue_height], dtype=np.float64)
        bs = self.bs_position
        out = []
        if not self._blocked(bs[:2], ue[:2]):
            d = float(np.linalg.norm(ue - bs))
            az, el = self.to_local(ue - bs)
            out.append((complex(1.0 / d), d / SPEED_OF_LIGHT, az, el))
        for sc, g in zip(self.scatterers, self.scatterer_gains):
            if self._blocked(ue[:2], sc[:2]) or self._blocked(sc[:2], bs[:2]):
                continue
            d1 = float(np.linalg.norm(sc - ue))
            d2 = float(np.linalg.norm(bs - sc))
            az, el = self.to_local(sc - bs)
            out.append((complex(g) / (d1 + d2), (d1 + d2) / SPEED_OF_LIGHT, az, el))
        return out


def build_environment(spec: EnvironmentSpec, seed: int, env_id: int = 0) -> Environment:
    xmin, xmax, ymin, ymax = spec.area
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"empty UE area {spec.area}")
    if spec.n_scatterers < 0:
        raise ValueError("n_scatterers must be >= 0")
    m = spec.scatterer_margin
    for poly in spec.blockers:
        for x, y in poly:
            if not (xmin - m <= x <= xmax + m and ymin - m <= y <= ymax + m):
                raise ValueError(f"blocker vertex {(x, y)} outside the bounding region")
    rng = np.random.default_rng(seed)
    n = spec.n_scatterers
    pts = np.column_stack([
        rng.uniform(xmin - m, xmax + m, n),
        rng.uniform(ymin - m, ymax + m, n),
        rng.uniform(0.0, 4.0, n),
    ])
    lo, hi = spec.scatterer_gain
    gains = rng.uniform(lo, hi, n) * np.exp(2j * np.pi * rng.uniform(0.0, 1.0, n))
    bs = np.asarray(spec.bs_position, dtype=np.float64)
    yaw = spec.bs_yaw
    if yaw is None:
        yaw = math.atan2((ymin + ymax) / 2 - bs[1], (xmin + xmax) / 2 - bs[0])
    return Environment(env_id, spec, bs, float(yaw), pts, gains, int(seed))


def synthesize_csi(env: Environment, position, noise_std: float = 0.0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Real/imag stacked CSI tensor of shape ``(N_R, N_C, 2)``."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if not env.contains(position):
        raise ValueError(f"position {tuple(position)} outside UE area {env.area}")
    cfg = env.array
    freqs = cfg.carrier_hz + cfg.subcarrier_offsets()
    h = np.zeros((cfg.n_antennas, cfg.n_subcarriers), dtype=np.complex128)
    for amp, tau, az, el in env.paths(position):
        h += amp * np.outer(array_response(cfg, az, el), np.exp(-2j * np.pi * freqs * tau))
    if noise_std > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        noise = rng.standard_normal((2,) + h.shape) * (noise_std / math.sqrt(2.0))
        h = h + noise[0] + 1j * noise[1]
    return np.stack([h.real, h.imag], axis=-1)


def reference_phase(H: np.ndarray) -> np.ndarray:
    """Rotate a fingerprint so antenna 0 / pilot 0 is real and non-negative.

    Removes the common phase, which moves a full turn every wavelength of UE
    displacement and carries no usable position information.
    """
    z = H[..., 0] + 1j * H[..., 1]
    ref = z[0, 0]
    if abs(ref) > 0:
        z = z * (np.conj(ref) / abs(ref))
    return np.stack([z.real, z.imag], axis=-1)


# datasets ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PositionNormalizer:
    """Affine per-axis map ``u = (p - offset) / scale`` onto the unit box."""

    offset: tuple[float, float]
    scale: tuple[float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.scale):
            raise ValueError("normalizer scale must be positive")

    @classmethod
    def from_area(cls, area) -> "PositionNormalizer":
        xmin, xmax, ymin, ymax = area
        return cls((float(xmin), float(ymin)), (float(xmax - xmin), float(ymax - ymin)))

    def forward(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p) - np.asarray(self.offset)) / np.asarray(self.scale)

    def inverse(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u) * np.asarray(self.scale) + np.asarray(self.offset)


@dataclass
class EnvironmentDataset:
    env_id: int
    H: np.ndarray  # (M, N_R, N_C, 2)
    positions: np.ndarray  # (M, 2) meters
    normalizer: PositionNormalizer
    name: str = ""
    noise_seed: int = 0
    csi_scale: float = 1.0
    env_type: str = "LOS"

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.H.ndim != 4 or self.H.shape[-1] != 2:
            raise ValueError(f"H must be (M, N_R, N_C, 2), got {self.H.shape}")
        if self.positions.shape != (self.H.shape[0], 2):
            raise ValueError(f"positions shape {self.positions.shape} does not match {self.H.shape[0]} samples")

    def __len__(self) -> int:
        return self.H.shape[0]

    @property
    def n_samples(self) -> int:
        return len(self)

    @property
    def csi_shape(self) -> tuple[int, int, int]:
        return tuple(self.H.shape[1:])

    def subset(self, idx) -> "EnvironmentDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return EnvironmentDataset(self.env_id, self.H[idx], self.positions[idx], self.normalizer,
                                  self.name, self.noise_seed, self.csi_scale, self.env_type)

    def targets(self) -> np.ndarray:
        """Positions mapped to the unit box."""
        return self.normalizer.forward(self.positions)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based per-sample generator, independent of generation order."""
    return np.random.default_rng([int(seed), int(index)])


def sample_positions(env: Environment, n: int, seed: int) -> np.ndarray:
    xmin, xmax, ymin, ymax = env.area
    rng = np.random.default_rng([int(seed), 0x5EED])
    return np.column_stack([rng.uniform(xmin, xmax, n), rng.uniform(ymin, ymax, n)])


def fingerprint(env: Environment, position, noise_std: float, seed: int, index: int) -> np.ndarray:
    """One phase-referenced sample before dataset power normalisation."""
    return reference_phase(synthesize_csi(env, position, noise_std, sample_rng(seed, index)))


def generate_dataset(env: Environment, n_samples: int, noise_std: float = 0.01,
                     seed: int = 0, name: str = "") -> EnvironmentDataset:
    """Draw ``n_samples`` uniform positions and their fingerprints.

    The dataset is scaled so the mean squared entry magnitude is 1; the
    factor is kept in ``csi_scale``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    pos = sample_positions(env, n_samples, seed)
    H = np.stack([fingerprint(env, p, noise_std, seed, i) for i, p in enumerate(pos)])
    power = float(np.mean(H[..., 0] ** 2 + H[..., 1] ** 2))
    scale = 1.0 / math.sqrt(power) if power > 0 else 1.0
    H *= scale
    return EnvironmentDataset(env.env_id, H, pos, PositionNormalizer.from_area(env.area),
                              name or f"env{env.env_id}", int(seed), scale, env.spec.env_type)


def check_compatible(datasets: Sequence[EnvironmentDataset]) -> tuple[int, int, int]:
    shapes = {d.csi_shape for d in datasets}
    if len(shapes) != 1:
        raise ValueError(f"mismatched CSI shapes across environments: {sorted(shapes)}")
    return shapes.pop()
