"""Dataset bundles, the Fresnel-style importer, config files, and rendering.

A dataset bundle is a directory tree: a JSON manifest describing the
circular measurement geometry, frequencies, units, and provenance, plus
one CSV per (frequency, transmitter) holding receiver angle and the
complex scattered field, written with 17 significant digits so float64
round-trips are exact.

The importer reads the whitespace-delimited laboratory format (one row
per sample: transmitter angle, receiver angle, frequency in GHz, and
Re/Im of the total and incident fields) and stores scattered = total -
incident.  The raw field units and normalization of measured data are
deliberately never rescaled here; the calibration factors exist to
absorb exactly that unknown.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import (
    CONVENTION,
    Annulus,
    Circle,
    ContrastMap,
    ImagingGrid,
    SceneSpec,
    SensorArray,
)
from .errors import ConfigurationError, DataError, ParseError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_SCHEMA = "scatlab-config/1"
BUNDLE_SCHEMA = "scatlab-bundle/1"
MAP_SCHEMA = "scatlab-map/1"

DEFAULT_COLUMN_MAP = {
    "tx": 0, "rx": 1, "freq": 2,
    "re_total": 3, "im_total": 4, "re_incident": 5, "im_incident": 6,
}


@dataclass
class DatasetBundle:
    """Measured or synthetic scattered fields on a circular sensor ring."""

    radius_m: float
    tx_angles_deg: np.ndarray
    rx_angles_deg: np.ndarray
    frequencies_hz: np.ndarray
    e_scat: np.ndarray
    e_inc_rx: np.ndarray = None
    units: str = "V/m"
    convention: str = CONVENTION
    provenance: dict = field(default_factory=dict)
    scene: SceneSpec = None

    def __post_init__(self):
        self.tx_angles_deg = np.asarray(self.tx_angles_deg, dtype=float)
        self.frequencies_hz = np.asarray(self.frequencies_hz, dtype=float)
        self.e_scat = np.asarray(self.e_scat, dtype=complex)
        self.rx_angles_deg = np.asarray(self.rx_angles_deg, dtype=float)
        K, P, Q = self.e_scat.shape
        if self.rx_angles_deg.shape != (K, P, Q):
            raise DataError(
                f"receiver angle block {self.rx_angles_deg.shape} does not match "
                f"field block {(K, P, Q)}"
            )
        if self.tx_angles_deg.shape != (P,) or self.frequencies_hz.shape != (K,):
            raise DataError("transmitter or frequency axis does not match fields")
        if np.any(np.diff(self.rx_angles_deg, axis=2) <= 0):
            raise DataError("receiver angles must be strictly increasing per (k, p)")
        if self.e_inc_rx is not None:
            self.e_inc_rx = np.asarray(self.e_inc_rx, dtype=complex)
            if self.e_inc_rx.shape != (K, P, Q):
                raise DataError("incident field block does not match fields")

    @property
    def shape(self):
        return self.e_scat.shape

    def common_rx_angles(self) -> np.ndarray:
        """Receiver angles if shared by every (k, p); error otherwise."""
        ref = self.rx_angles_deg[0, 0]
        if not np.allclose(self.rx_angles_deg, ref[np.newaxis, np.newaxis, :]):
            raise DataError(
                "receiver angles differ across (frequency, transmitter); this "
                "dataset needs per-transmitter receiver handling"
            )
        return ref

    def sensor_array(self) -> SensorArray:
        """Sensor layout for datasets with a common receiver ring."""
        rx = self.common_rx_angles()
        tx_rad = np.deg2rad(self.tx_angles_deg)
        rx_rad = np.deg2rad(rx)
        return SensorArray(
            tx_positions=self.radius_m
            * np.column_stack([np.cos(tx_rad), np.sin(tx_rad)]),
            rx_positions=self.radius_m
            * np.column_stack([np.cos(rx_rad), np.sin(rx_rad)]),
        )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _scene_to_json(scene: SceneSpec):
    out = []
    for prim in scene.primitives:
        if isinstance(prim, Circle):
            out.append({"kind": "circle", "center": list(prim.center),
                        "radius": prim.radius, "eps_r": prim.eps_r})
        else:
            out.append({"kind": "annulus", "center": list(prim.center),
                        "inner_radius": prim.inner_radius,
                        "outer_radius": prim.outer_radius, "eps_r": prim.eps_r})
    return out


def _scene_from_json(items):
    prims = []
    for item in items:
        if item["kind"] == "circle":
            prims.append(Circle(tuple(item["center"]), item["radius"], item["eps_r"]))
        elif item["kind"] == "annulus":
            prims.append(Annulus(tuple(item["center"]), item["inner_radius"],
                                 item["outer_radius"], item["eps_r"]))
        else:
            raise DataError(f"unknown scene primitive kind {item['kind']!r}")
    return SceneSpec(primitives=tuple(prims))


def export_bundle(bundle: DatasetBundle, path) -> None:
    """Write manifest.json plus one fields CSV per (k, p) under path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    K, P, Q = bundle.shape
    manifest = {
        "schema": BUNDLE_SCHEMA,
        "radius_m": bundle.radius_m,
        "tx_angles_deg": [float(a) for a in bundle.tx_angles_deg],
        "frequencies_hz": [float(f) for f in bundle.frequencies_hz],
        "n_freq": K, "n_tx": P, "n_rx": Q,
        "units": bundle.units,
        "convention": bundle.convention,
        "provenance": bundle.provenance,
        "has_incident": bundle.e_inc_rx is not None,
        "scene": _scene_to_json(bundle.scene) if bundle.scene is not None else None,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for k in range(K):
        for p in range(P):
            lines = ["rx_angle_deg,re_vpm,im_vpm"]
            for q in range(Q):
                lines.append(
                    f"{_fmt(bundle.rx_angles_deg[k, p, q])},"
                    f"{_fmt(bundle.e_scat[k, p, q].real)},"
                    f"{_fmt(bundle.e_scat[k, p, q].imag)}"
                )
            (root / f"fields_k{k + 1}_p{p + 1}.csv").write_text(
                "\n".join(lines) + "\n", encoding="utf-8", newline="\n"
            )
            if bundle.e_inc_rx is not None:
                lines = ["rx_angle_deg,re_vpm,im_vpm"]
                for q in range(Q):
                    lines.append(
                        f"{_fmt(bundle.rx_angles_deg[k, p, q])},"
                        f"{_fmt(bundle.e_inc_rx[k, p, q].real)},"
                        f"{_fmt(bundle.e_inc_rx[k, p, q].imag)}"
                    )
                (root / f"incident_k{k + 1}_p{p + 1}.csv").write_text(
                    "\n".join(lines) + "\n", encoding="utf-8", newline="\n"
                )


def _read_field_csv(path: Path):
    rows = path.read_text(encoding="utf-8").strip().splitlines()
    if rows[0].strip() != "rx_angle_deg,re_vpm,im_vpm":
        raise ParseError(f"{path.name}: unexpected header {rows[0]!r}")
    angles, values = [], []
    for line in rows[1:]:
        a, re, im = line.split(",")
        angles.append(float(a))
        values.append(complex(float(re), float(im)))
    return np.array(angles), np.array(values)


def load_bundle(path) -> DatasetBundle:
    """Read back a bundle directory written by export_bundle."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("schema") != BUNDLE_SCHEMA:
        raise ParseError(f"not a {BUNDLE_SCHEMA} bundle: {manifest.get('schema')!r}")
    K, P, Q = manifest["n_freq"], manifest["n_tx"], manifest["n_rx"]
    rx_angles = np.empty((K, P, Q))
    e_scat = np.empty((K, P, Q), dtype=complex)
    e_inc = np.empty((K, P, Q), dtype=complex) if manifest["has_incident"] else None
    for k in range(K):
        for p in range(P):
            angles, values = _read_field_csv(root / f"fields_k{k + 1}_p{p + 1}.csv")
            if angles.size != Q:
                raise ParseError(
                    f"fields_k{k + 1}_p{p + 1}.csv has {angles.size} rows, manifest says {Q}"
                )
            rx_angles[k, p] = angles
            e_scat[k, p] = values
            if e_inc is not None:
                _, vals_inc = _read_field_csv(root / f"incident_k{k + 1}_p{p + 1}.csv")
                e_inc[k, p] = vals_inc
    scene = _scene_from_json(manifest["scene"]) if manifest.get("scene") else None
    return DatasetBundle(
        radius_m=manifest["radius_m"],
        tx_angles_deg=np.array(manifest["tx_angles_deg"]),
        rx_angles_deg=rx_angles,
        frequencies_hz=np.array(manifest["frequencies_hz"]),
        e_scat=e_scat,
        e_inc_rx=e_inc,
        units=manifest["units"],
        convention=manifest["convention"],
        provenance=manifest["provenance"],
        scene=scene,
    )


def parse_column_map(text: str) -> dict:
    """Parse "tx=0,rx=1,freq=2,..." column remapping strings."""
    mapping = dict(DEFAULT_COLUMN_MAP)
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in mapping:
            raise ConfigurationError(f"unknown column name {key!r} in column map")
        mapping[key] = int(value)
    return mapping


def import_fresnel(path, radius_m: float = 1.67, column_map: dict = None) -> DatasetBundle:
    """Parse a laboratory multistatic text file into a bundle.

    Expected columns (whitespace-delimited, remappable via column_map):
    transmitter angle [deg], receiver angle [deg], frequency [GHz],
    Re/Im total field, Re/Im incident field.  Header and comment lines
    ('#', '%', '//', or non-numeric) are skipped.  The scattered field is
    stored as total minus incident; receiver angles are kept exactly as
    found in the file.

    Raises
    ------
    ParseError
        On NaN fields (with the line number) or inconsistent record
        counts across (frequency, transmitter) groups.
    """
    cols = dict(DEFAULT_COLUMN_MAP)
    if column_map:
        cols.update(column_map)
    n_cols_needed = max(cols.values()) + 1

    records = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith(("#", "%", "//")):
                continue
            parts = stripped.split()
            if len(parts) < n_cols_needed:
                continue
            try:
                values = [float(parts[cols[name]]) for name in
                          ("tx", "rx", "freq", "re_total", "im_total",
                           "re_incident", "im_incident")]
            except ValueError:
                continue  # header-like text row
            if any(math.isnan(v) or math.isinf(v) for v in values):
                raise ParseError(
                    f"non-finite field value at line {line_no}",
                    details=[f"line {line_no}: {stripped}"],
                )
            tx, rx, freq_ghz, re_t, im_t, re_i, im_i = values
            scat = complex(re_t - re_i, im_t - im_i)
            records.setdefault((freq_ghz, tx), []).append((rx, scat, complex(re_i, im_i)))

    if not records:
        raise ParseError(f"no data rows found in {path}")
    freq_values = sorted({k[0] for k in records})
    tx_values = sorted({k[1] for k in records})
    counts = {key: len(v) for key, v in records.items()}
    q_set = set(counts.values())
    if len(q_set) != 1 or len(records) != len(freq_values) * len(tx_values):
        bad = [f"freq={f} GHz, tx={t} deg: {counts.get((f, t), 0)} records"
               for f in freq_values for t in tx_values]
        raise ParseError("inconsistent record counts across (frequency, transmitter)",
                         details=bad)
    Q = q_set.pop()
    K, P = len(freq_values), len(tx_values)
    rx_angles = np.empty((K, P, Q))
    e_scat = np.empty((K, P, Q), dtype=complex)
    e_inc = np.empty((K, P, Q), dtype=complex)
    for k, f in enumerate(freq_values):
        for p, t in enumerate(tx_values):
            rows = sorted(records[(f, t)], key=lambda r: r[0])
            rx_angles[k, p] = [r[0] for r in rows]
            e_scat[k, p] = [r[1] for r in rows]
            e_inc[k, p] = [r[2] for r in rows]
    return DatasetBundle(
        radius_m=radius_m,
        tx_angles_deg=np.array(tx_values),
        rx_angles_deg=rx_angles,
        frequencies_hz=np.array(freq_values) * 1e9,
        e_scat=e_scat,
        e_inc_rx=e_inc,
        provenance={
            "source": "fresnel-import",
            "file": str(path),
            "scattered_from_total_minus_incident": True,
            "amplitude_rescaled": False,
        },
    )


# ---------------------------------------------------------------------------
# Permittivity map files


def save_contrast_map(chi: ContrastMap, path) -> None:
    grid = chi.grid
    lines = [
        f"# {MAP_SCHEMA} nx={grid.nx} ny={grid.ny} "
        f"extent_x={_fmt(grid.extent_x)} extent_y={_fmt(grid.extent_y)}",
        "re_chi,im_chi",
    ]
    for v in chi.values:
        lines.append(f"{_fmt(v.real)},{_fmt(v.imag)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_contrast_map(path) -> ContrastMap:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = lines[0]
    if MAP_SCHEMA not in header:
        raise ParseError(f"{path}: not a {MAP_SCHEMA} file")
    meta = dict(item.split("=") for item in header.split()[2:])
    grid = ImagingGrid(
        nx=int(meta["nx"]), ny=int(meta["ny"]),
        extent_x=float(meta["extent_x"]), extent_y=float(meta["extent_y"]),
    )
    values = []
    for line in lines[2:]:
        re, im = line.split(",")
        values.append(complex(float(re), float(im)))
    return ContrastMap(grid, np.array(values))


# ---------------------------------------------------------------------------
# Traces and rendering


def write_cost_trace(cost_history, path) -> None:
    lines = ["iteration,data_term,state_term,calib_term,reg_term,total"]
    for i, c in enumerate(cost_history, start=1):
        lines.append(
            f"{i},{_fmt(c.data_term)},{_fmt(c.state_term)},"
            f"{_fmt(c.calib_term)},{_fmt(c.reg_term)},{_fmt(c.total)}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_lambda_trace(lambda_history, path) -> None:
    """Magnitude and phase per transmitter per iteration, row-per-(iter,k,p)."""
    lines = ["iteration,freq_index,tx_index,magnitude,phase_rad,re,im"]
    for i, lam in enumerate(lambda_history, start=1):
        K, P = lam.shape
        for k in range(K):
            for p in range(P):
                v = lam[k, p]
                lines.append(
                    f"{i},{k},{p},{_fmt(abs(v))},{_fmt(np.angle(v))},"
                    f"{_fmt(v.real)},{_fmt(v.imag)}"
                )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def render_permittivity(chi: ContrastMap, path, title: str = "relative permittivity"):
    """Linear-scale heatmap PNG with annotated min/max; warns on flat maps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    eps = chi.eps_r.reshape(chi.grid.ny, chi.grid.nx)
    if np.ptp(eps) == 0.0:
        import warnings

        warnings.warn("rendering a constant permittivity map", stacklevel=2)
    half_x, half_y = chi.grid.extent_x / 2, chi.grid.extent_y / 2
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(
        eps, origin="lower", extent=[-half_x, half_x, -half_y, half_y],
        cmap="viridis", interpolation="nearest",
    )
    fig.colorbar(im, ax=ax, label="eps_r")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"{title} (min {eps.min():.3f}, max {eps.max():.3f})")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Run configuration

_CONFIG_KEYS = {
    "schema": None,
    "seed": None,
    "freqs": None,
    "grid": {"nx", "ny", "extent"},
    "sensors": {"kind", "radius", "P", "Q"},
    "scene": {"template", "circles", "annuli"},
    "forward": {"lambda_true", "solver", "tol", "max_iter"},
    "subspace": {"cutoff", "cutoff_value"},
    "inversion": {
        "beta", "T", "max_iters", "w_inner_iters", "chi_mode", "chi_inner_iters",
        "calibration_mode", "lambda_domain", "surrogate_mode", "exact_solver",
        "calibration_passes",
    },
    "surrogate": {
        "layers", "epochs", "lr", "batch", "patience", "n_per_config", "templates",
        "model",
    },
}


def _check_unknown_keys(raw: dict) -> None:
    for key, value in raw.items():
        if key not in _CONFIG_KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
        allowed = _CONFIG_KEYS[key]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ConfigurationError(f"config section {key!r} must be a table")
        for sub in value:
            if sub not in allowed:
                raise ConfigurationError(f"unknown config key {key}.{sub}")
        if key == "scene":
            for sub in ("circles", "annuli"):
                for item in value.get(sub, []):
                    extra = set(item) - {"center", "radius", "inner_radius",
                                         "outer_radius", "eps_r"}
                    if extra:
                        raise ConfigurationError(
                            f"unknown scene key(s) {sorted(extra)} in scene.{sub}"
                        )


def load_config(path) -> dict:
    """Parse and validate a TOML run configuration.

    Unknown keys are rejected rather than ignored, so typos fail loudly.
    """
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    if raw.get("schema") != CONFIG_SCHEMA:
        raise ConfigurationError(
            f"config schema must be {CONFIG_SCHEMA!r}, got {raw.get('schema')!r}"
        )
    _check_unknown_keys(raw)
    return raw


def scene_from_config(raw: dict) -> SceneSpec:
    from .domain import SCENE_TEMPLATES

    scene_cfg = raw.get("scene", {})
    if "template" in scene_cfg:
        name = scene_cfg["template"]
        if name not in SCENE_TEMPLATES:
            raise ConfigurationError(
                f"unknown scene template {name!r}; choices: {sorted(SCENE_TEMPLATES)}"
            )
        return SCENE_TEMPLATES[name]()
    prims = []
    for item in scene_cfg.get("circles", []):
        prims.append(Circle(tuple(item["center"]), item["radius"], item["eps_r"]))
    for item in scene_cfg.get("annuli", []):
        prims.append(Annulus(tuple(item["center"]), item["inner_radius"],
                             item["outer_radius"], item["eps_r"]))
    if not prims:
        raise ConfigurationError("config has no scene template or primitives")
    return SceneSpec(primitives=tuple(prims))
