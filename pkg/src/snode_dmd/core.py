"""Shared domain types, complex linear algebra helpers and the dataset format.

Complex arrays are numpy ``complex128``, whose memory layout is already
interleaved real/imag float64; on disk they are written in exactly that
layout, little-endian, next to a JSON manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised when a dataset or checkpoint directory is inconsistent."""


class NumericalError(RuntimeError):
    """Raised when a numerical routine fails to converge or produces non-finite output."""


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class CoordSet:
    """Ordered, duplicate-free set of ``m`` coordinates in ``d`` dimensions."""

    def __init__(self, coords):
        c = np.atleast_2d(np.asarray(coords, dtype=float))
        if c.ndim != 2 or c.shape[1] < 1 or c.shape[0] < 1:
            raise ValueError(f"coordinates must have shape (m, d), got {c.shape}")
        if not np.isfinite(c).all():
            raise ValueError("coordinates must be finite")
        if len(np.unique(c, axis=0)) != len(c):
            raise ValueError("duplicate coordinates in CoordSet")
        self.coords = _frozen(c)

    def __len__(self):
        return self.coords.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]

    def subset(self, indices) -> "CoordSet":
        return CoordSet(self.coords[np.asarray(indices, dtype=int)])

    def __eq__(self, other):
        return isinstance(other, CoordSet) and np.array_equal(self.coords, other.coords)

    def __repr__(self):
        return f"CoordSet(m={len(self)}, d={self.dim})"


@dataclass(frozen=True)
class Field:
    """Complex snapshot over a coordinate set at time ``time``."""

    values: np.ndarray
    coords: CoordSet
    time: float = 0.0

    def __post_init__(self):
        v = _frozen(self.values, complex)
        if v.ndim != 1 or len(v) != len(self.coords):
            raise ValueError(f"field has {v.size} values for {len(self.coords)} coordinates")
        if not np.isfinite(v).all():
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Spectrum:
    """Continuous eigenvalues, their discrete counterparts and the spatial modes."""

    lambdas: np.ndarray
    dt: float
    modes: np.ndarray | None = None
    mus: np.ndarray | None = None

    def __post_init__(self):
        lam = _frozen(self.lambdas, complex)
        object.__setattr__(self, "lambdas", lam)
        mus = np.exp(lam * self.dt) if self.mus is None else np.asarray(self.mus, complex)
        if not np.allclose(mus, np.exp(lam * self.dt), rtol=0, atol=1e-10):
            raise ValueError("mus must equal exp(lambdas * dt)")
        object.__setattr__(self, "mus", _frozen(mus))
        if self.modes is not None:
            object.__setattr__(self, "modes", _frozen(self.modes, complex))


def grid_coords(nx: int, ny: int | None = None, periodic: bool = False) -> np.ndarray:
    """Row-major coordinates of an ``ny x nx`` grid on ``[-1, 1]^2``.

    Point ``iy * nx + ix`` sits at ``(x[ix], y[iy])``. A periodic grid
    excludes the right/top endpoint.
    """
    ny = nx if ny is None else ny
    if periodic:
        x = -1.0 + 2.0 * np.arange(nx) / nx
        y = -1.0 + 2.0 * np.arange(ny) / ny
    else:
        x = np.linspace(-1.0, 1.0, nx)
        y = np.linspace(-1.0, 1.0, ny)
    X, Y = np.meshgrid(x, y)
    return np.stack([X.ravel(), Y.ravel()], axis=1)


@dataclass(frozen=True)
class Dataset:
    """Sparse observation sequence plus optional full-grid truth.

    ``observations`` has shape (p, m) over the sensors, ``truth`` (p, n)
    over the full grid; both complex. ``times`` must be uniform with
    spacing ``dt``.
    """

    system: str
    grid: CoordSet
    grid_shape: tuple[int, int]
    sensor_indices: np.ndarray
    observations: np.ndarray
    times: np.ndarray
    dt: float
    seed: int = 0
    noise_sigma: float = 0.0
    truth: np.ndarray | None = None
    gt_spectrum: Spectrum | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = _frozen(self.sensor_indices, np.int64)
        if idx.ndim != 1 or len(idx) == 0:
            raise ValueError("need at least one sensor")
        if idx.min() < 0 or idx.max() >= len(self.grid) or len(np.unique(idx)) != len(idx):
            raise ValueError("sensor indices must be distinct grid indices")
        obs = _frozen(self.observations, complex)
        times = _frozen(self.times, float)
        if obs.ndim != 2 or obs.shape[1] != len(idx):
            raise ValueError(f"observations shape {obs.shape} does not match {len(idx)} sensors")
        if len(times) != obs.shape[0]:
            raise ValueError("one time stamp per observation required")
        if len(times) > 1:
            steps = np.diff(times)
            if np.any(np.abs(steps - self.dt) > 1e-9 * abs(self.dt)):
                raise ValueError("times must be uniformly spaced by dt")
        if self.grid_shape[0] * self.grid_shape[1] != len(self.grid):
            raise ValueError("grid_shape does not match grid size")
        object.__setattr__(self, "sensor_indices", idx)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))
        if self.truth is not None:
            truth = _frozen(self.truth, complex)
            if truth.shape != (obs.shape[0], len(self.grid)):
                raise ValueError(f"truth shape {truth.shape} inconsistent with dataset")
            object.__setattr__(self, "truth", truth)

    @property
    def n_snapshots(self) -> int:
        return self.observations.shape[0]

    @property
    def sensors(self) -> CoordSet:
        return self.grid.subset(self.sensor_indices)

    @property
    def is_complex(self) -> bool:
        return bool(self.meta.get("complex", True))

    def observation_field(self, k: int) -> Field:
        return Field(self.observations[k], self.sensors, float(self.times[k]))

    def truth_field(self, k: int) -> Field:
        if self.truth is None:
            raise ValueError("dataset carries no truth")
        return Field(self.truth[k], self.grid, float(self.times[k]))


def complex_svd(M):
    """Thin SVD ``M = U diag(s) V^H`` with ``s`` descending.

    Returns ``(U, s, V)``, i.e. ``V`` itself rather than its conjugate
    transpose.
    """
    M = np.asarray(M, dtype=complex)
    if M.size == 0:
        raise ValueError("empty matrix")
    if not np.isfinite(M).all():
        raise ValueError("matrix has non-finite entries")
    try:
        U, s, Vh = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    return U, s, Vh.conj().T


def hermitian_psd_project(M):
    """Nearest Hermitian PSD matrix: symmetrize, then clamp negative eigenvalues."""
    M = np.asarray(M)
    H = 0.5 * (M + np.conj(np.swapaxes(M, -1, -2)))
    w, Q = np.linalg.eigh(H)
    if np.all(w >= 0):
        return H
    w = np.clip(w, 0.0, None)
    out = (Q * w[..., None, :]) @ np.conj(np.swapaxes(Q, -1, -2))
    return 0.5 * (out + np.conj(np.swapaxes(out, -1, -2)))


# -- on-disk format ---------------------------------------------------------

def write_array(path, a, is_complex=None):
    a = np.asarray(a)
    if is_complex is None:
        is_complex = np.iscomplexobj(a)
    dtype = "<c16" if is_complex else "<f8"
    np.ascontiguousarray(a, dtype=dtype).tofile(path)
    return {"file": os.path.basename(path), "shape": list(a.shape), "complex": bool(is_complex)}


def read_array(directory, entry):
    path = Path(directory) / entry["file"]
    shape = tuple(int(s) for s in entry["shape"])
    raw = np.fromfile(path, dtype="<f8")
    expected = int(np.prod(shape)) * (2 if entry["complex"] else 1)
    if raw.size != expected:
        raise FormatError(f"{path}: {raw.size} float64 values, manifest expects {expected}")
    if entry["complex"]:
        return raw.view("<c16").reshape(shape).astype(complex)
    return raw.reshape(shape).astype(float)


def _jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as ``manifest.json`` plus one raw binary file per array."""
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
        arrays = {
            "grid_coords": write_array(d / "grid_coords.bin", ds.grid.coords, False),
            "observations": write_array(d / "observations.bin", ds.observations, True),
        }
        if ds.truth is not None:
            arrays["truth"] = write_array(d / "truth.bin", ds.truth, True)
        if ds.gt_spectrum is not None:
            arrays["gt_lambdas"] = write_array(d / "gt_lambdas.bin", ds.gt_spectrum.lambdas, True)
            arrays["gt_mus"] = write_array(d / "gt_mus.bin", ds.gt_spectrum.mus, True)
            if ds.gt_spectrum.modes is not None:
                arrays["gt_modes"] = write_array(d / "gt_modes.bin", ds.gt_spectrum.modes, True)
        manifest = {
            "version": FORMAT_VERSION,
            "system": ds.system,
            "seed": int(ds.seed),
            "dt": float(ds.dt),
            "times": [float(t) for t in ds.times],
            "grid_shape": list(ds.grid_shape),
            "sensor_indices": [int(i) for i in ds.sensor_indices],
            "noise_sigma": float(ds.noise_sigma),
            "arrays": arrays,
            "meta": ds.meta,
        }
        write_json(d / "manifest.json", manifest)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {d}: {exc}") from exc


def load_dataset(path) -> Dataset:
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest in {d}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{d}: unsupported manifest version {manifest.get('version')}")
    arrays = manifest["arrays"]
    try:
        grid = read_array(d, arrays["grid_coords"])
        obs = read_array(d, arrays["observations"])
        truth = read_array(d, arrays["truth"]) if "truth" in arrays else None
        spectrum = None
        if "gt_lambdas" in arrays:
            modes = read_array(d, arrays["gt_modes"]) if "gt_modes" in arrays else None
            spectrum = Spectrum(read_array(d, arrays["gt_lambdas"]), manifest["dt"],
                                modes=modes, mus=read_array(d, arrays["gt_mus"]))
        return Dataset(
            system=manifest["system"],
            grid=CoordSet(grid),
            grid_shape=tuple(manifest["grid_shape"]),
            sensor_indices=np.asarray(manifest["sensor_indices"], dtype=np.int64),
            observations=obs,
            times=np.asarray(manifest["times"], dtype=float),
            dt=float(manifest["dt"]),
            seed=int(manifest["seed"]),
            noise_sigma=float(manifest["noise_sigma"]),
            truth=truth,
            gt_spectrum=spectrum,
            meta=manifest.get("meta", {}),
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{d}: {exc}") from exc
