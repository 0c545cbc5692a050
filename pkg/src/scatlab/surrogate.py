"""Feed-forward neural surrogate of the forward scattering operator.

A small fully-connected network learns the map from a real permittivity
image to the complex scattered fields at every (frequency, transmitter,
receiver) sample, replacing the exact forward solve inside the inversion
loop.  Everything is plain numpy: Glorot-initialized tanh layers trained
with mini-batch Adam on per-feature standardized inputs and outputs, with
early stopping on a held-out split and the best-validation snapshot kept.

Training data comes from the exact forward solver run on scene templates
whose homogeneous scatterers get independent permittivity draws from
Uniform(1.1, 5); the lower bound keeps every scatterer distinguishable
from the free-space background.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .domain import (
    CONVENTION,
    Annulus,
    Circle,
    ContrastMap,
    FrequencySet,
    ImagingGrid,
    SceneSpec,
    SensorArray,
    geometry_hash,
    rasterize,
)
from .errors import ConfigurationError, DataError
from .forward import GreensOperators, simulate_scattered_fields
from .seeding import STAGE_TRAINING, STAGE_TRAINING_SET, stage_rng

logger = logging.getLogger(__name__)

MODEL_MAGIC = "SCATLAB-MLP-1"

EPS_LOWER, EPS_UPPER = 1.1, 5.0


@dataclass(frozen=True)
class SurrogateHyper:
    hidden: tuple = (512, 512)
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 2000
    patience: int = 100
    val_fraction: float = 0.2
    # halve the step when validation stalls this many epochs; floor 1e-5
    lr_plateau: int = 40


@dataclass
class TrainingSet:
    """Pairs of permittivity images and exact scattered fields.

    eps_maps is (S, N) real; fields is (S, K, P, Q) complex.  provenance
    records, per sample, the template name, the sample seed spawn index,
    and the drawn permittivities.
    """

    eps_maps: np.ndarray
    fields: np.ndarray
    grid: ImagingGrid
    sensors: SensorArray
    freqs: FrequencySet
    provenance: list = field(default_factory=list)
    seed: int = 0

    @property
    def n_samples(self) -> int:
        return self.eps_maps.shape[0]

    @property
    def geometry_hash(self) -> str:
        return geometry_hash(self.grid, self.sensors, self.freqs)


@dataclass
class Surrogate:
    """Trained network plus the normalization and geometry metadata."""

    layer_sizes: tuple
    weights: list
    biases: list
    activation: str
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    geometry_hash: str
    grid_shape: tuple
    n_tx: int
    n_rx: int
    frequencies_hz: tuple
    convention: str = CONVENTION
    manifest: dict = field(default_factory=dict)
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)


def _redraw_scene(template: SceneSpec, rng: np.random.Generator):
    """Same shapes as the template, fresh Uniform(1.1, 5) permittivities."""
    prims = []
    drawn = []
    for prim in template.primitives:
        eps = float(rng.uniform(EPS_LOWER, EPS_UPPER))
        drawn.append(eps)
        if isinstance(prim, Circle):
            prims.append(Circle(prim.center, prim.radius, eps))
        elif isinstance(prim, Annulus):
            prims.append(Annulus(prim.center, prim.inner_radius, prim.outer_radius, eps))
        else:
            raise ConfigurationError(f"unsupported primitive {type(prim).__name__}")
    return SceneSpec(primitives=tuple(prims)), drawn


def generate_training_set(
    templates: dict,
    grid: ImagingGrid,
    sensors: SensorArray,
    freqs: FrequencySet,
    operators: GreensOperators,
    e_inc_domain: np.ndarray,
    n_per_config: int,
    seed: int,
    solver_method: str = "direct",
    solver_tol: float = 1e-8,
    solver_max_iter: int = 2000,
    max_resamples: int = 5,
) -> TrainingSet:
    """Exact forward solves over randomized-permittivity scene templates.

    Deterministic for a given seed; a sample whose forward solve fails to
    converge is redrawn (with a logged substitution) up to max_resamples
    times.
    """
    if n_per_config < 1:
        raise ConfigurationError("n_per_config must be at least 1")
    n_total = n_per_config * len(templates)
    eps_maps = np.empty((n_total, grid.n_cells))
    fields = np.empty((n_total, freqs.n_freq, sensors.n_tx, sensors.n_rx), dtype=complex)
    provenance = []
    idx = 0
    for name, template in templates.items():
        for sample in range(n_per_config):
            rng = stage_rng(seed, STAGE_TRAINING_SET, idx)
            for attempt in range(max_resamples + 1):
                scene, drawn = _redraw_scene(template, rng)
                chi = rasterize(scene, grid)
                reports = []
                sim = simulate_scattered_fields(
                    chi, operators, e_inc_domain,
                    tol=solver_tol, max_iter=solver_max_iter, method=solver_method,
                    on_report=lambda k, p, rep: reports.append(rep),
                )
                if all(rep.converged for rep in reports):
                    break
                logger.warning(
                    "forward solve did not converge for %s sample %d (attempt %d); resampling",
                    name, sample, attempt,
                )
            else:
                raise DataError(f"forward solve kept failing for template {name!r}")
            eps_maps[idx] = 1.0 + chi.values.real
            fields[idx] = sim.e_scat_rx
            provenance.append(
                {"template": name, "sample": sample, "stream": idx,
                 "eps_r": drawn, "resampled": attempt}
            )
            idx += 1
    return TrainingSet(
        eps_maps=eps_maps, fields=fields, grid=grid, sensors=sensors,
        freqs=freqs, provenance=provenance, seed=seed,
    )


def _flatten_fields(fields: np.ndarray) -> np.ndarray:
    """(S, K, P, Q) complex -> (S, 2*K*P*Q) real: all Re then all Im."""
    flat = fields.reshape(fields.shape[0], -1)
    return np.concatenate([flat.real, flat.imag], axis=1)


def _unflatten_fields(y: np.ndarray, shape_kpq: tuple) -> np.ndarray:
    half = y.shape[-1] // 2
    flat = y[..., :half] + 1j * y[..., half:]
    return flat.reshape(y.shape[:-1] + shape_kpq)


def _init_layers(layer_sizes, rng):
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return weights, biases


def _forward_pass(weights, biases, x, keep_hidden=False):
    hidden = []
    h = x
    for w, b in zip(weights[:-1], biases[:-1]):
        pre = h @ w + b
        h = np.tanh(pre)
        if keep_hidden:
            hidden.append(h)
    out = h @ weights[-1] + biases[-1]
    return (out, hidden) if keep_hidden else out


class _Adam:
    def __init__(self, params, lr):
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)


def train(
    training_set: TrainingSet,
    hyper: Optional[SurrogateHyper] = None,
    seed: int = 0,
) -> Surrogate:
    """Mini-batch Adam on standardized inputs/outputs; best snapshot wins.

    Raises
    ------
    DataError
        With fewer than 50 samples or a NaN validation loss.
    """
    hyper = hyper or SurrogateHyper()
    s_total = training_set.n_samples
    if s_total < 50:
        raise DataError(f"need at least 50 training samples, got {s_total}")

    x_all = training_set.eps_maps
    y_all = _flatten_fields(training_set.fields)

    rng = stage_rng(seed, STAGE_TRAINING)
    perm = rng.permutation(s_total)
    n_val = max(1, int(round(hyper.val_fraction * s_total)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    x_mean = x_all[train_idx].mean(axis=0)
    x_scale = np.maximum(x_all[train_idx].std(axis=0), 1e-12)
    y_mean = y_all[train_idx].mean(axis=0)
    y_scale = np.maximum(y_all[train_idx].std(axis=0), 1e-15)

    xt = (x_all[train_idx] - x_mean) / x_scale
    yt = (y_all[train_idx] - y_mean) / y_scale
    xv = (x_all[val_idx] - x_mean) / x_scale
    yv = (y_all[val_idx] - y_mean) / y_scale

    layer_sizes = (x_all.shape[1],) + tuple(hyper.hidden) + (y_all.shape[1],)
    weights, biases = _init_layers(layer_sizes, rng)
    opt = _Adam(weights + biases, hyper.learning_rate)

    best = {"val": np.inf, "weights": None, "biases": None, "epoch": 0}
    train_curve, val_curve = [], []
    n_train = xt.shape[0]
    last_improve = 0
    for epoch in range(1, hyper.max_epochs + 1):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, hyper.batch_size):
            sel = order[start:start + hyper.batch_size]
            xb, yb = xt[sel], yt[sel]
            out, hidden = _forward_pass(weights, biases, xb, keep_hidden=True)
            err = out - yb
            epoch_loss += np.sum(err ** 2)
            # Backprop of mean-squared error through tanh layers.
            delta = (2.0 / err.size) * err
            grads_w = [None] * len(weights)
            grads_b = [None] * len(biases)
            acts = [xb] + hidden
            for layer in range(len(weights) - 1, -1, -1):
                grads_w[layer] = acts[layer].T @ delta
                grads_b[layer] = delta.sum(axis=0)
                if layer > 0:
                    delta = (delta @ weights[layer].T) * (1.0 - acts[layer] ** 2)
            opt.step(weights + biases, grads_w + grads_b)
        train_mse = epoch_loss / (n_train * yt.shape[1])
        val_mse = float(np.mean((_forward_pass(weights, biases, xv) - yv) ** 2))
        if not np.isfinite(val_mse):
            raise DataError(f"validation loss became non-finite at epoch {epoch}")
        train_curve.append(train_mse)
        val_curve.append(val_mse)
        if val_mse < best["val"]:
            best.update(
                val=val_mse,
                weights=[w.copy() for w in weights],
                biases=[b.copy() for b in biases],
                epoch=epoch,
            )
            last_improve = epoch
        if hyper.lr_plateau and epoch - last_improve >= hyper.lr_plateau:
            opt.lr = max(opt.lr * 0.5, 1e-5)
            last_improve = epoch
        if epoch - best["epoch"] >= hyper.patience:
            break

    grid = training_set.grid
    return Surrogate(
        layer_sizes=layer_sizes,
        weights=best["weights"],
        biases=best["biases"],
        activation="tanh",
        x_mean=x_mean, x_scale=x_scale, y_mean=y_mean, y_scale=y_scale,
        geometry_hash=training_set.geometry_hash,
        grid_shape=(grid.nx, grid.ny),
        n_tx=training_set.sensors.n_tx,
        n_rx=training_set.sensors.n_rx,
        frequencies_hz=tuple(float(f) for f in training_set.freqs.frequencies_hz),
        manifest={
            "n_samples": int(s_total),
            "n_train": int(n_train),
            "n_val": int(n_val),
            "seed": int(seed),
            "data_seed": int(training_set.seed),
            "templates": sorted({p["template"] for p in training_set.provenance}),
            "best_epoch": int(best["epoch"]),
            "epochs_run": len(train_curve),
            "best_val_mse_normalized": float(best["val"]),
            "hyper": {
                "hidden": list(hyper.hidden),
                "learning_rate": hyper.learning_rate,
                "batch_size": hyper.batch_size,
                "max_epochs": hyper.max_epochs,
                "patience": hyper.patience,
                "val_fraction": hyper.val_fraction,
            },
        },
        train_curve=train_curve,
        val_curve=val_curve,
    )


def predict(surrogate: Surrogate, chi: ContrastMap) -> np.ndarray:
    """One forward pass: contrast map -> scattered fields (K, P, Q).

    Warns when the input permittivity leaves the trained range; such
    predictions are extrapolations but still returned.
    """
    eps = 1.0 + chi.values.real
    if eps.size != surrogate.layer_sizes[0]:
        raise DataError(
            f"contrast has {eps.size} cells; surrogate expects {surrogate.layer_sizes[0]}"
        )
    if eps.min() < 1.0 - 1e-9 or eps.max() > 8.0:
        warnings.warn("permittivity outside [1, 8]; surrogate extrapolating", stacklevel=2)
    x = (eps[np.newaxis, :] - surrogate.x_mean) / surrogate.x_scale
    y = _forward_pass(surrogate.weights, surrogate.biases, x)
    y = y * surrogate.y_scale + surrogate.y_mean
    shape = (len(surrogate.frequencies_hz), surrogate.n_tx, surrogate.n_rx)
    return _unflatten_fields(y[0], shape)


def normalized_mse(surrogate: Surrogate, eps_maps: np.ndarray, fields: np.ndarray) -> float:
    """MSE in the standardized output space (the training objective)."""
    x = (eps_maps - surrogate.x_mean) / surrogate.x_scale
    y_true = (_flatten_fields(fields) - surrogate.y_mean) / surrogate.y_scale
    y_pred = _forward_pass(surrogate.weights, surrogate.biases, x)
    return float(np.mean((y_pred - y_true) ** 2))


def physical_mse(surrogate: Surrogate, eps_maps: np.ndarray, fields: np.ndarray) -> float:
    """MSE in field units (V/m)^2 over the stacked Re/Im components."""
    x = (eps_maps - surrogate.x_mean) / surrogate.x_scale
    y_pred = _forward_pass(surrogate.weights, surrogate.biases, x)
    y_pred = y_pred * surrogate.y_scale + surrogate.y_mean
    return float(np.mean((y_pred - _flatten_fields(fields)) ** 2))


def save_surrogate(surrogate: Surrogate, path) -> None:
    """Self-describing container: magic line, JSON header, float64 payload."""
    arrays = []
    names = []
    for i, (w, b) in enumerate(zip(surrogate.weights, surrogate.biases)):
        arrays += [w, b]
        names += [f"w{i}", f"b{i}"]
    for name in ("x_mean", "x_scale", "y_mean", "y_scale"):
        arrays.append(getattr(surrogate, name))
        names.append(name)
    header = {
        "layer_sizes": list(surrogate.layer_sizes),
        "activation": surrogate.activation,
        "geometry_hash": surrogate.geometry_hash,
        "grid_shape": list(surrogate.grid_shape),
        "n_tx": surrogate.n_tx,
        "n_rx": surrogate.n_rx,
        "frequencies_hz": list(surrogate.frequencies_hz),
        "convention": surrogate.convention,
        "manifest": surrogate.manifest,
        "train_curve": [float(v) for v in surrogate.train_curve],
        "val_curve": [float(v) for v in surrogate.val_curve],
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC.encode("ascii") + b"\n")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_surrogate(path) -> Surrogate:
    with open(path, "rb") as fh:
        magic = fh.readline().strip().decode("ascii", errors="replace")
        if magic != MODEL_MAGIC:
            raise DataError(f"not a {MODEL_MAGIC} model file (magic {magic!r})")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            size = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(size * 8)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(spec["shape"]).copy()
    n_layers = sum(1 for name in arrays if name.startswith("w"))
    return Surrogate(
        layer_sizes=tuple(header["layer_sizes"]),
        weights=[arrays[f"w{i}"] for i in range(n_layers)],
        biases=[arrays[f"b{i}"] for i in range(n_layers)],
        activation=header["activation"],
        x_mean=arrays["x_mean"], x_scale=arrays["x_scale"],
        y_mean=arrays["y_mean"], y_scale=arrays["y_scale"],
        geometry_hash=header["geometry_hash"],
        grid_shape=tuple(header["grid_shape"]),
        n_tx=header["n_tx"], n_rx=header["n_rx"],
        frequencies_hz=tuple(header["frequencies_hz"]),
        convention=header["convention"],
        manifest=header["manifest"],
        train_curve=header["train_curve"],
        val_curve=header["val_curve"],
    )
