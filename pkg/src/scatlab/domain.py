"""Imaging domain description: grid, sensors, frequencies, contrast maps, scenes.

The imaging region D is a square-celled rectangular grid of cell centers.
Sensors (transmitters and receivers) live on a measurement domain S that
must not intersect D.  Material is described by the complex contrast

    chi = eps_r - 1 + sigma / (j * omega * eps0)

relative to a free-space background, so chi = 0 outside scatterers and
eps_r = 1 + Re(chi).  All types in this module are immutable after
construction and safe to share between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, GeometryError

# Vacuum permittivity [F/m] and permeability [H/m], CODATA 2018.
EPS0 = 8.8541878128e-12
MU0 = 1.25663706212e-6

# Field/time convention used everywhere, including surrogate training data:
# exp(+j*omega*t) with outgoing waves carried by Hankel functions of the
# second kind.
CONVENTION = "tm-2d/exp(+jwt)/hankel2"


@dataclass(frozen=True)
class PhysicalConstants:
    """Vacuum constants; fixed, kept as a type so manifests can embed them."""

    eps0: float = EPS0
    mu0: float = MU0

    @property
    def c0(self) -> float:
        return 1.0 / math.sqrt(self.eps0 * self.mu0)


@dataclass(frozen=True)
class ImagingGrid:
    """Square-celled imaging grid centered on the origin of its extent.

    Parameters
    ----------
    nx, ny : int
        Cell counts along x and y.
    extent_x, extent_y : float
        Physical side lengths in meters.  The grid spans
        [-extent_x/2, extent_x/2] x [-extent_y/2, extent_y/2].

    Raises
    ------
    ConfigurationError
        If counts are not positive or the cells are not square.
    """

    nx: int
    ny: int
    extent_x: float
    extent_y: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigurationError("grid cell counts must be positive")
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise ConfigurationError("grid extents must be positive")
        hx = self.extent_x / self.nx
        hy = self.extent_y / self.ny
        if not math.isclose(hx, hy, rel_tol=1e-12):
            raise ConfigurationError(
                f"cells must be square: extent_x/nx={hx:g} != extent_y/ny={hy:g}"
            )

    @property
    def cell_size(self) -> float:
        return self.extent_x / self.nx

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.cell_size ** 2

    @property
    def cell_centers(self) -> np.ndarray:
        """(nx*ny, 2) array of cell-center coordinates, x-fastest ordering."""
        h = self.cell_size
        xs = (np.arange(self.nx) + 0.5) * h - self.extent_x / 2.0
        ys = (np.arange(self.ny) + 0.5) * h - self.extent_y / 2.0
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points strictly inside the extent."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return (
            (np.abs(p[:, 0]) < self.extent_x / 2.0)
            & (np.abs(p[:, 1]) < self.extent_y / 2.0)
        )


@dataclass(frozen=True)
class SensorArray:
    """Transmitter and receiver positions in meters.

    Positions are 2D points; the array is immutable (arrays are copied and
    flagged read-only).  Use :func:`validate_sensor_clearance` against a
    grid to enforce D-and-S disjointness.
    """

    tx_positions: np.ndarray
    rx_positions: np.ndarray

    def __post_init__(self):
        tx = np.array(self.tx_positions, dtype=float, copy=True).reshape(-1, 2)
        rx = np.array(self.rx_positions, dtype=float, copy=True).reshape(-1, 2)
        if tx.shape[0] < 1 or rx.shape[0] < 1:
            raise ConfigurationError("need at least one transmitter and one receiver")
        tx.setflags(write=False)
        rx.setflags(write=False)
        object.__setattr__(self, "tx_positions", tx)
        object.__setattr__(self, "rx_positions", rx)

    @property
    def n_tx(self) -> int:
        return self.tx_positions.shape[0]

    @property
    def n_rx(self) -> int:
        return self.rx_positions.shape[0]


def validate_sensor_clearance(grid: ImagingGrid, sensors: SensorArray) -> None:
    """Reject sensor layouts that place any antenna inside the imaging grid."""
    for name, pos in (("tx", sensors.tx_positions), ("rx", sensors.rx_positions)):
        inside = grid.contains(pos)
        if inside.any():
            idx = int(np.flatnonzero(inside)[0])
            raise GeometryError(
                f"{name} position {idx} at {tuple(pos[idx])} lies inside the imaging grid"
            )


@dataclass(frozen=True)
class FrequencySet:
    """Operating frequencies in hertz, strictly increasing."""

    frequencies_hz: np.ndarray

    def __post_init__(self):
        f = np.array(self.frequencies_hz, dtype=float, copy=True).reshape(-1)
        if f.size < 1:
            raise ConfigurationError("need at least one frequency")
        if np.any(f <= 0):
            raise ConfigurationError("frequencies must be positive")
        if np.any(np.diff(f) <= 0):
            raise ConfigurationError("frequencies must be strictly increasing")
        f.setflags(write=False)
        object.__setattr__(self, "frequencies_hz", f)

    @property
    def n_freq(self) -> int:
        return self.frequencies_hz.size

    @property
    def omega(self) -> np.ndarray:
        return 2.0 * np.pi * self.frequencies_hz

    @property
    def k0(self) -> np.ndarray:
        """Background wavenumbers omega * sqrt(mu0 * eps0)."""
        return self.omega * math.sqrt(MU0 * EPS0)

    @property
    def wavelength(self) -> np.ndarray:
        return 2.0 * np.pi / self.k0


@dataclass(frozen=True)
class ContrastMap:
    """Per-cell complex contrast chi on an :class:`ImagingGrid`."""

    grid: ImagingGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=complex, copy=True).reshape(-1)
        if v.size != self.grid.n_cells:
            raise ConfigurationError(
                f"contrast length {v.size} does not match grid with {self.grid.n_cells} cells"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def eps_r(self) -> np.ndarray:
        """Relative permittivity 1 + Re(chi) per cell."""
        return 1.0 + np.real(self.values)

    def as_image(self) -> np.ndarray:
        """Contrast reshaped to (ny, nx) for rendering."""
        return self.values.reshape(self.grid.ny, self.grid.nx)

    def with_values(self, values: np.ndarray) -> "ContrastMap":
        return ContrastMap(self.grid, values)


@dataclass(frozen=True)
class Circle:
    center: tuple
    radius: float
    eps_r: float


@dataclass(frozen=True)
class Annulus:
    center: tuple
    inner_radius: float
    outer_radius: float
    eps_r: float


@dataclass(frozen=True)
class SceneSpec:
    """Piecewise-constant dielectric scene over a free-space background.

    Primitives are painted in order: a cell takes the contrast of the last
    primitive whose region contains the cell center.
    """

    primitives: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        for prim in self.primitives:
            if prim.eps_r <= 1.0:
                raise ConfigurationError(
                    f"primitive eps_r must exceed the background value 1, got {prim.eps_r}"
                )
            if isinstance(prim, Annulus) and not (
                0.0 <= prim.inner_radius < prim.outer_radius
            ):
                raise ConfigurationError("annulus radii must satisfy 0 <= inner < outer")

    def bounding_radius(self, prim) -> float:
        if isinstance(prim, Circle):
            return prim.radius
        return prim.outer_radius


def rasterize(scene: SceneSpec, grid: ImagingGrid) -> ContrastMap:
    """Paint a scene onto a grid: cell value = chi of the last covering primitive.

    Deterministic and pure; paper-style lossless scenes yield real chi.

    Raises
    ------
    ConfigurationError
        If any primitive extends beyond the grid extent.
    """
    for prim in scene.primitives:
        cx, cy = prim.center
        r = scene.bounding_radius(prim)
        if (
            abs(cx) + r > grid.extent_x / 2.0
            or abs(cy) + r > grid.extent_y / 2.0
        ):
            raise ConfigurationError(
                f"primitive at {prim.center} with radius {r:g} extends outside the grid"
            )

    centers = grid.cell_centers
    chi = np.zeros(grid.n_cells, dtype=complex)
    for prim in scene.primitives:
        d2 = (centers[:, 0] - prim.center[0]) ** 2 + (centers[:, 1] - prim.center[1]) ** 2
        if isinstance(prim, Circle):
            mask = d2 <= prim.radius ** 2
        else:
            mask = (d2 >= prim.inner_radius ** 2) & (d2 <= prim.outer_radius ** 2)
        chi[mask] = prim.eps_r - 1.0
    return ContrastMap(grid, chi)


def fresnel_geometry(radius: float = 1.67, n_tx: int = 8, n_rx: int = 241) -> SensorArray:
    """Sensor circle mimicking the Fresnel Institute multistatic setup.

    8 transmitters uniformly spaced on a 1.67 m circle starting at angle 0,
    and 241 receivers at 1 degree spacing.  The measured receiver arc is not
    published with the scene specs, so the default places the receivers over
    [60, 300] degrees, leaving the arc around transmitter 1 unoccupied; this
    choice is an assumption and importers always keep the angles found in
    actual data files instead.
    """
    tx_angles = np.deg2rad(np.arange(n_tx) * (360.0 / n_tx))
    rx_angles = np.deg2rad(60.0 + np.arange(n_rx))
    tx = radius * np.column_stack([np.cos(tx_angles), np.sin(tx_angles)])
    rx = radius * np.column_stack([np.cos(rx_angles), np.sin(rx_angles)])
    return SensorArray(tx_positions=tx, rx_positions=rx)


def circular_sensors(radius: float, n_tx: int, n_rx: int) -> SensorArray:
    """Uniform full-circle transmitter/receiver rings (synthetic studies)."""
    tx_angles = 2.0 * np.pi * np.arange(n_tx) / n_tx
    rx_angles = 2.0 * np.pi * (np.arange(n_rx) + 0.5) / n_rx
    tx = radius * np.column_stack([np.cos(tx_angles), np.sin(tx_angles)])
    rx = radius * np.column_stack([np.cos(rx_angles), np.sin(rx_angles)])
    return SensorArray(tx_positions=tx, rx_positions=rx)


def foam_diel_int_scene(foam_eps: float = 1.45, plastic_eps: float = 3.0) -> SceneSpec:
    """Foam cylinder (d=80mm) with a plastic cylinder (d=31mm) inside it."""
    return SceneSpec(
        primitives=(
            Circle(center=(0.0, 0.0), radius=0.040, eps_r=foam_eps),
            Circle(center=(-0.005, 0.0), radius=0.0155, eps_r=plastic_eps),
        )
    )


def foam_diel_ext_scene(foam_eps: float = 1.45, plastic_eps: float = 3.0) -> SceneSpec:
    """Foam cylinder (d=80mm) with a plastic cylinder (d=31mm) adjacent to it."""
    return SceneSpec(
        primitives=(
            Circle(center=(0.0, 0.0), radius=0.040, eps_r=foam_eps),
            Circle(center=(-0.0555, 0.0), radius=0.0155, eps_r=plastic_eps),
        )
    )


SCENE_TEMPLATES = {
    "foamdielint": foam_diel_int_scene,
    "foamdielext": foam_diel_ext_scene,
}


def geometry_hash(grid: ImagingGrid, sensors: SensorArray, freqs: FrequencySet) -> str:
    """Stable digest of grid, sensor layout, frequencies, and convention.

    Surrogates record this at training time; inversion refuses a surrogate
    whose hash differs from the run geometry.
    """
    import hashlib

    h = hashlib.sha256()
    h.update(CONVENTION.encode())
    h.update(np.asarray([grid.nx, grid.ny], dtype=np.int64).tobytes())
    h.update(np.asarray([grid.extent_x, grid.extent_y], dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(sensors.tx_positions, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(sensors.rx_positions, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(freqs.frequencies_hz, dtype=np.float64).tobytes())
    return h.hexdigest()
