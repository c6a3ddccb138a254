"""Training-data and prior-ensemble generation.

Two field families:

* stationary Gaussian random fields with an exponential covariance
  C(h) = sigma^2 * exp(-h / range), drawn by circulant embedding (FFT) with a
  dense-Cholesky fallback for grids where the embedding fails to be
  nonnegative-definite;
* three-facies channelized fields built object-by-object from sinuous bands
  over a background facies, with a continuous variant that superimposes
  high-permeability streaks on a Gaussian background.

Facies carry fixed permeabilities of 100 / 1000 / 9000 mD; all downstream
flow works on natural-log permeability.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ensemble import Ensemble
from .errors import ConfigError

FACIES_PERM_MD = (100.0, 1000.0, 9000.0)
FACIES_LOG_PERM = tuple(float(np.log(p)) for p in FACIES_PERM_MD)


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    dx: float = 25.0
    dy: float = 25.0

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ConfigError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if self.dx <= 0 or self.dy <= 0:
            raise ConfigError("cell sizes must be positive")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)


@dataclass
class Realization:
    grid: Grid
    values: np.ndarray                 # (ny, nx)
    kind: str                          # categorical-facies | continuous-logperm | normalized
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} != grid {self.grid.shape}")
        if self.kind not in ("categorical-facies", "continuous-logperm", "normalized"):
            raise ValueError(f"unknown realization kind {self.kind!r}")

    @property
    def vector(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class CovarianceSpec:
    mean: float
    std: float
    range_cells: float
    model: str = "exponential"

    def __post_init__(self):
        if self.model != "exponential":
            raise ConfigError(f"unsupported covariance model {self.model!r}")
        if self.std < 0:
            raise ConfigError("std must be >= 0")
        if self.range_cells <= 0:
            raise ConfigError("correlation range must be > 0")


# -- Gaussian random fields ----------------------------------------------------


def _embedding_eigenvalues(grid: Grid, spec: CovarianceSpec, factor: int) -> tuple[np.ndarray, int, int]:
    my, mx = factor * grid.ny, factor * grid.nx
    iy = np.minimum(np.arange(my), my - np.arange(my))
    ix = np.minimum(np.arange(mx), mx - np.arange(mx))
    h = np.sqrt(iy[:, None] ** 2 + ix[None, :] ** 2)
    cov = spec.std**2 * np.exp(-h / spec.range_cells)
    lam = np.fft.fft2(cov).real
    return lam, my, mx


def _covariance_matrix(grid: Grid, spec: CovarianceSpec) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(grid.ny), np.arange(grid.nx), indexing="ij")
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    return spec.std**2 * np.exp(-d / spec.range_cells)


class _GrfSampler:
    """Reusable sampler: embedding eigenvalues (or Cholesky factor) cached."""

    def __init__(self, grid: Grid, spec: CovarianceSpec):
        self.grid = grid
        self.spec = spec
        self.mode = "constant" if spec.std == 0 else None
        if self.mode == "constant":
            return
        for factor in (2, 3, 4):
            lam, my, mx = _embedding_eigenvalues(grid, spec, factor)
            if lam.min() > -1e-9 * lam.max():
                self.mode = "fft"
                self.lam = np.maximum(lam, 0.0)
                self.my, self.mx = my, mx
                return
        self.mode = "cholesky"
        cov = _covariance_matrix(grid, spec)
        cov[np.diag_indices_from(cov)] += 1e-10 * spec.std**2
        self.chol = np.linalg.cholesky(cov)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        g = self.grid
        if self.mode == "constant":
            return np.full(g.shape, self.spec.mean)
        if self.mode == "fft":
            noise = rng.normal(size=(self.my, self.mx)) + 1j * rng.normal(size=(self.my, self.mx))
            coef = np.fft.fft2(noise) * np.sqrt(self.lam / (self.my * self.mx))
            sample = np.fft.ifft2(coef).real * np.sqrt(self.my * self.mx)
            return self.spec.mean + sample[: g.ny, : g.nx]
        z = rng.normal(size=g.n_cells)
        return self.spec.mean + (self.chol @ z).reshape(g.shape)


def gaussian_random_field(grid: Grid, spec: CovarianceSpec, seed: int) -> Realization:
    sampler = _GrfSampler(grid, spec)
    values = sampler.draw(np.random.default_rng(seed))
    return Realization(grid, values, "continuous-logperm")


def build_prior_ensemble(grid: Grid, spec: CovarianceSpec, n_e: int, seed: int) -> Ensemble:
    """N_e independent field draws, stream per member (seed + index)."""
    if n_e < 2:
        raise ConfigError("prior ensemble needs N_e >= 2 (covariances are undefined otherwise)")
    sampler = _GrfSampler(grid, spec)
    members = np.empty((n_e, grid.n_cells))
    for j in range(n_e):
        members[j] = sampler.draw(np.random.default_rng(seed + j)).reshape(-1)
    return Ensemble(members, space="model")


def prior_realizations(grid: Grid, spec: CovarianceSpec, n_e: int, seed: int) -> list[Realization]:
    ens = build_prior_ensemble(grid, spec, n_e, seed)
    return [Realization(grid, m.reshape(grid.shape), "continuous-logperm") for m in ens.members]


# -- channelized facies fields ---------------------------------------------------


@dataclass(frozen=True)
class ChannelParams:
    """Object-based channel simulation controls.

    ``orientation_deg`` is the mean channel azimuth (45 degrees reproduces the
    rotated training-image look); channel count is uniform over the inclusive
    range; widths are in cells.
    """

    n_channels: tuple[int, int] = (2, 4)
    orientation_deg: float = 45.0
    orientation_std_deg: float = 12.0
    width_cells: tuple[float, float] = (3.0, 5.0)
    levee_cells: float = 1.5
    amplitude_cells: float = 2.5
    wavelength_cells: float = 20.0

    def __post_init__(self):
        if self.width_cells[0] <= 0:
            raise ConfigError("channel width must be positive")
        if self.n_channels[0] < 0 or self.n_channels[1] < self.n_channels[0]:
            raise ConfigError("channel count range is invalid")


def channel_field(grid: Grid, params: ChannelParams, seed: int) -> Realization:
    """Background facies 0, levee facies 1, channel facies 2."""
    rng = np.random.default_rng(seed)
    codes = np.zeros(grid.shape, dtype=np.int64)
    n = int(rng.integers(params.n_channels[0], params.n_channels[1] + 1))
    diag = float(np.hypot(grid.nx, grid.ny))
    drawn_lengths = []
    widths = []
    for _ in range(n):
        theta = np.deg2rad(rng.normal(params.orientation_deg, params.orientation_std_deg))
        width = rng.uniform(*params.width_cells)
        amp = rng.uniform(0.3, 1.0) * params.amplitude_cells
        lam = rng.uniform(0.7, 1.3) * params.wavelength_cells
        phase = rng.uniform(0, 2 * np.pi)
        # anchor the centerline inside the grid, march along the direction
        cx = rng.uniform(0, grid.nx)
        cy = rng.uniform(0, grid.ny)
        ts = np.arange(-diag, diag, 0.25)
        ux, uy = np.cos(theta), np.sin(theta)
        off = amp * np.sin(2 * np.pi * ts / lam + phase)
        px = cx + ts * ux - off * uy
        py = cy + ts * uy + off * ux
        inside = (px >= -width) & (px < grid.nx + width) & (py >= -width) & (py < grid.ny + width)
        px, py = px[inside], py[inside]
        if px.size == 0:
            continue
        center_cells = set()
        half = width / 2.0
        reach = int(np.ceil(half + params.levee_cells))
        offsets = [(dy, dx) for dy in range(-reach, reach + 1) for dx in range(-reach, reach + 1)]
        offs = np.array(offsets)
        dist = np.hypot(offs[:, 0], offs[:, 1])
        chan_offs = offs[dist <= half]
        levee_offs = offs[(dist > half) & (dist <= half + params.levee_cells)]
        ix = np.floor(px).astype(int)
        iy = np.floor(py).astype(int)
        for oy, ox in levee_offs:
            yy = iy + oy
            xx = ix + ox
            ok = (yy >= 0) & (yy < grid.ny) & (xx >= 0) & (xx < grid.nx)
            sel = codes[yy[ok], xx[ok]]
            codes[yy[ok], xx[ok]] = np.maximum(sel, 1)
        for oy, ox in chan_offs:
            yy = iy + oy
            xx = ix + ox
            ok = (yy >= 0) & (yy < grid.ny) & (xx >= 0) & (xx < grid.nx)
            codes[yy[ok], xx[ok]] = 2
        in_grid = (ix >= 0) & (ix < grid.nx) & (iy >= 0) & (iy < grid.ny)
        center_cells.update(zip(iy[in_grid].tolist(), ix[in_grid].tolist()))
        drawn_lengths.append(len(center_cells))
        widths.append(width)
    meta = {
        "n_channels": n,
        "drawn_lengths": drawn_lengths,
        "widths": widths,
        "orientation_deg": params.orientation_deg,
    }
    return Realization(grid, codes.astype(np.float64), "categorical-facies", meta=meta)


def facies_to_log_perm(r: Realization) -> Realization:
    """Map facies codes {0,1,2} to ln(100), ln(1000), ln(9000) mD exactly."""
    if r.kind != "categorical-facies":
        raise ValueError("facies_to_log_perm expects a categorical realization")
    codes = r.values.astype(np.int64)
    if not np.isin(codes, [0, 1, 2]).all():
        raise ValueError("facies codes outside {0,1,2}")
    table = np.asarray(FACIES_LOG_PERM)
    return Realization(r.grid, table[codes], "continuous-logperm", meta=dict(r.meta))


def continuous_field(grid: Grid, spec: CovarianceSpec, params: ChannelParams, seed: int,
                     streak_amplitude: float = 2.5) -> Realization:
    """Non-Gaussian log-permeability: Gaussian background plus high-perm streaks."""
    rng = np.random.default_rng(seed)
    base = _GrfSampler(grid, spec).draw(rng)
    streaks = channel_field(grid, params, seed + 1_000_003)
    bump = (streaks.values == 2).astype(np.float64) * streak_amplitude \
        + (streaks.values == 1).astype(np.float64) * (0.4 * streak_amplitude)
    values = base + bump
    meta = dict(streaks.meta)
    return Realization(grid, values, "continuous-logperm", meta=meta)


# -- normalization ---------------------------------------------------------------


def normalize(r: Realization, lo: float, hi: float) -> Realization:
    """Affine map [lo, hi] -> [-1, 1]; a degenerate range maps to zero."""
    if hi < lo:
        raise ValueError("normalize needs hi >= lo")
    if hi == lo:
        values = np.zeros_like(r.values)
    else:
        values = 2.0 * (r.values - lo) / (hi - lo) - 1.0
    return Realization(r.grid, values, "normalized", meta=dict(r.meta))


def denormalize(r: Realization, lo: float, hi: float, kind: str = "continuous-logperm") -> Realization:
    if hi == lo:
        values = np.full_like(r.values, lo)
    else:
        values = (r.values + 1.0) * 0.5 * (hi - lo) + lo
    return Realization(r.grid, values, kind, meta=dict(r.meta))


def normalize_array(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi == lo:
        return np.zeros_like(values)
    return 2.0 * (values - lo) / (hi - lo) - 1.0


def denormalize_array(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi == lo:
        return np.full_like(values, lo)
    return (values + 1.0) * 0.5 * (hi - lo) + lo


# -- dataset container and file format --------------------------------------------

_MAGIC = b"RMDS0001"


@dataclass
class Dataset:
    """A stack of raw (un-normalized) fields plus the shared normalization bounds."""

    grid: Grid
    kind: str                       # categorical | continuous
    fields: np.ndarray              # (N, ny, nx) float32, raw log-perm values
    bounds: tuple[float, float]
    seed: int
    labels: np.ndarray | None = None       # optional integer labels (classifier data)
    label_names: list[str] | None = None

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float32)
        if self.fields.ndim != 3 or self.fields.shape[1:] != self.grid.shape:
            raise ValueError(f"dataset field block {self.fields.shape} does not match grid {self.grid.shape}")

    @property
    def count(self) -> int:
        return self.fields.shape[0]

    def normalized(self) -> np.ndarray:
        lo, hi = self.bounds
        return normalize_array(self.fields.astype(np.float64), lo, hi).astype(np.float32)


def generate_dataset(grid: Grid, case: str, count: int, seed: int,
                     channel_params: ChannelParams | None = None,
                     cov_spec: CovarianceSpec | None = None,
                     with_labels: bool = False) -> Dataset:
    """Build a training dataset of raw log-permeability fields.

    The categorical case rasterizes channel objects and maps facies to their
    log-permeabilities; bounds are then the exact facies log-perm extremes so
    the three classes land on three fixed normalized levels.  Orientation and
    channel-count buckets become labels when requested.
    """
    channel_params = channel_params or ChannelParams()
    if case == "categorical":
        fields = np.empty((count, grid.ny, grid.nx), dtype=np.float32)
        labels = np.empty(count, dtype=np.int64) if with_labels else None
        orientations = (30.0, 45.0, 60.0)
        for i in range(count):
            if with_labels:
                ori = orientations[i % 3]
                dense = i % 2
                params_i = ChannelParams(
                    n_channels=(1, 2) if dense == 0 else (3, 5),
                    orientation_deg=ori,
                    orientation_std_deg=6.0,
                    width_cells=channel_params.width_cells,
                    levee_cells=channel_params.levee_cells,
                    amplitude_cells=channel_params.amplitude_cells,
                    wavelength_cells=channel_params.wavelength_cells,
                )
                labels[i] = (i % 3) * 2 + dense
            else:
                params_i = channel_params
            r = channel_field(grid, params_i, seed + i)
            fields[i] = facies_to_log_perm(r).values
        bounds = (FACIES_LOG_PERM[0], FACIES_LOG_PERM[-1])
        names = [f"ori{int(o)}_{d}" for o in orientations for d in ("sparse", "dense")] if with_labels else None
        return Dataset(grid, "categorical", fields, bounds, seed, labels=labels, label_names=names)
    if case == "continuous":
        cov_spec = cov_spec or CovarianceSpec(mean=np.log(1000.0), std=1.0, range_cells=8.0)
        fields = np.empty((count, grid.ny, grid.nx), dtype=np.float32)
        labels = np.empty(count, dtype=np.int64) if with_labels else None
        orientations = (30.0, 45.0, 60.0)
        for i in range(count):
            params_i = channel_params
            if with_labels:
                ori = orientations[i % 3]
                dense = i % 2
                params_i = ChannelParams(
                    n_channels=(1, 2) if dense == 0 else (3, 5),
                    orientation_deg=ori,
                    orientation_std_deg=6.0,
                    width_cells=channel_params.width_cells,
                )
                labels[i] = (i % 3) * 2 + dense
            r = continuous_field(grid, cov_spec, params_i, seed + i)
            fields[i] = r.values
        lo = float(np.min(fields))
        hi = float(np.max(fields))
        names = [f"ori{int(o)}_{d}" for o in orientations for d in ("sparse", "dense")] if with_labels else None
        return Dataset(grid, "continuous", fields, (lo, hi), seed, labels=labels, label_names=names)
    raise ConfigError(f"unknown dataset case {case!r} (expected categorical or continuous)")


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "grid": {"nx": ds.grid.nx, "ny": ds.grid.ny, "dx": ds.grid.dx, "dy": ds.grid.dy},
        "kind": ds.kind,
        "count": ds.count,
        "bounds": list(ds.bounds),
        "seed": ds.seed,
        "has_labels": ds.labels is not None,
        "label_names": ds.label_names,
    }
    blob = json.dumps(header).encode("utf-8")
    with path.open("wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(ds.fields.astype("<f4").tobytes(order="C"))
        if ds.labels is not None:
            f.write(ds.labels.astype("<i8").tobytes(order="C"))
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise ConfigError(f"{path} is not a dataset file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    g = header["grid"]
    grid = Grid(nx=g["nx"], ny=g["ny"], dx=g["dx"], dy=g["dy"])
    count = header["count"]
    start = 12 + hlen
    n_floats = count * grid.ny * grid.nx
    fields = np.frombuffer(raw, dtype="<f4", count=n_floats, offset=start).reshape(count, grid.ny, grid.nx).copy()
    labels = None
    if header.get("has_labels"):
        labels = np.frombuffer(raw, dtype="<i8", count=count, offset=start + 4 * n_floats).copy()
    return Dataset(grid, header["kind"], fields, tuple(header["bounds"]), header["seed"],
                   labels=labels, label_names=header.get("label_names"))
