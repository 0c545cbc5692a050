"""Command-line pipeline: simulate, train, invert, evaluate, render.

Every subcommand takes --config (TOML, schema "scatlab-config/1") plus a
small set of flag overrides; --seed makes each stage deterministic.  On
failure the process exits nonzero after printing a machine-readable JSON
error object to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .domain import (
    ContrastMap,
    FrequencySet,
    ImagingGrid,
    SCENE_TEMPLATES,
    circular_sensors,
    fresnel_geometry,
    geometry_hash,
    rasterize,
)
from .dataio import (
    DatasetBundle,
    export_bundle,
    import_fresnel,
    load_bundle,
    load_config,
    load_contrast_map,
    parse_column_map,
    render_permittivity,
    save_contrast_map,
    scene_from_config,
    write_cost_trace,
    write_lambda_trace,
)
from .errors import (
    ConfigurationError,
    DataError,
    DivergenceError,
    GeometryError,
    ParseError,
    ScatlabError,
)
from .forward import build_greens, incident_field, simulate_scattered_fields
from .inversion import InversionConfig, nse, run
from .subspace import CutoffRule, decompose
from .surrogate import (
    SurrogateHyper,
    TrainingSet,
    generate_training_set,
    load_surrogate,
    predict,
    save_surrogate,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _geometry_from_config(cfg):
    grid_cfg = cfg.get("grid", {})
    grid = ImagingGrid(
        nx=int(grid_cfg.get("nx", 32)),
        ny=int(grid_cfg.get("ny", 32)),
        extent_x=float(grid_cfg.get("extent", 0.15)),
        extent_y=float(grid_cfg.get("extent", 0.15)),
    )
    s_cfg = cfg.get("sensors", {})
    kind = s_cfg.get("kind", "circular")
    radius = float(s_cfg.get("radius", 1.67))
    n_tx = int(s_cfg.get("P", 8))
    n_rx = int(s_cfg.get("Q", 64))
    if kind == "fresnel":
        sensors = fresnel_geometry(radius=radius, n_tx=n_tx, n_rx=n_rx)
    elif kind == "circular":
        sensors = circular_sensors(radius=radius, n_tx=n_tx, n_rx=n_rx)
    else:
        raise ConfigurationError(f"unknown sensors.kind {kind!r}")
    freqs = FrequencySet(np.asarray(cfg.get("freqs", [2e9, 4e9, 6e9, 8e9]), dtype=float))
    return grid, sensors, freqs


def _lambda_from_config(cfg, n_freq, n_tx):
    value = cfg.get("forward", {}).get("lambda_true", 1.0)
    lam = np.ones((n_freq, n_tx), dtype=complex)
    if isinstance(value, (int, float)):
        lam *= value
    elif isinstance(value, list) and value and isinstance(value[0], (int, float)) and len(value) == 2:
        lam *= complex(value[0], value[1])
    elif isinstance(value, list):
        if len(value) != n_tx:
            raise ConfigurationError(
                f"forward.lambda_true list must have one entry per transmitter ({n_tx})"
            )
        for p, item in enumerate(value):
            if isinstance(item, (int, float)):
                lam[:, p] = item
            else:
                lam[:, p] = complex(item[0], item[1])
    else:
        raise ConfigurationError("forward.lambda_true must be scalar, [re, im], or a list")
    return lam


def _inversion_config(cfg, args):
    inv = dict(cfg.get("inversion", {}))
    overrides = {
        "beta": args.beta,
        "T": args.termination_tol,
        "max_iters": args.max_iters,
        "calibration_mode": args.calibration_mode,
        "lambda_domain": args.lambda_domain,
        "surrogate_mode": args.surrogate_mode,
    }
    for key, value in overrides.items():
        if value is not None:
            inv[key] = value
    return InversionConfig(
        beta=float(inv.get("beta", 1e-3)),
        termination_tol=float(inv.get("T", 5e-4)),
        max_outer_iters=int(inv.get("max_iters", 200)),
        w_inner_iters=int(inv.get("w_inner_iters", 20)),
        chi_mode=str(inv.get("chi_mode", "closed_form")),
        chi_inner_iters=int(inv.get("chi_inner_iters", 20)),
        calibration_mode=str(inv.get("calibration_mode", "per_tx")),
        lambda_domain=str(inv.get("lambda_domain", "complex")),
        surrogate_mode=str(inv.get("surrogate_mode", "exact_forward")),
        exact_solver=str(inv.get("exact_solver", "cgd")),
        calibration_passes=int(inv.get("calibration_passes", 1)),
    )


def _cutoff_from_config(cfg):
    sub = cfg.get("subspace", {})
    return CutoffRule(kind=sub.get("cutoff", "ratio"), value=sub.get("cutoff_value", 1e-3))


def _seed(cfg, args):
    if args.seed is not None:
        return int(args.seed)
    return int(cfg.get("seed", 0))


def _bundle_from_fields(sensors, freqs, fields, scene, provenance):
    tx_angles = np.rad2deg(np.arctan2(sensors.tx_positions[:, 1], sensors.tx_positions[:, 0]))
    rx_angles = np.rad2deg(np.arctan2(sensors.rx_positions[:, 1], sensors.rx_positions[:, 0]))
    rx_angles = np.mod(rx_angles, 360.0)
    order = np.argsort(rx_angles)
    K, P = freqs.n_freq, sensors.n_tx
    rx_block = np.tile(rx_angles[order], (K, P, 1))
    radius = float(np.linalg.norm(sensors.tx_positions[0]))
    return DatasetBundle(
        radius_m=radius,
        tx_angles_deg=np.mod(tx_angles, 360.0),
        rx_angles_deg=rx_block,
        frequencies_hz=freqs.frequencies_hz,
        e_scat=fields[:, :, order],
        provenance=provenance,
        scene=scene,
    ), order


def cmd_forward(args):
    cfg = load_config(args.config)
    grid, sensors, freqs = _geometry_from_config(cfg)
    scene = scene_from_config(cfg)
    chi = rasterize(scene, grid)
    ops = build_greens(grid, sensors, freqs)
    e_inc = incident_field(sensors, grid, freqs, at_receivers=False)
    lam = _lambda_from_config(cfg, freqs.n_freq, sensors.n_tx)
    solver = cfg.get("forward", {}).get("solver", "cgd")
    fields = simulate_scattered_fields(
        chi, ops, e_inc.e_inc_domain, lambdas=lam,
        tol=float(cfg.get("forward", {}).get("tol", 1e-8)),
        max_iter=int(cfg.get("forward", {}).get("max_iter", 2000)),
        method=solver,
    )
    bundle, _ = _bundle_from_fields(
        sensors, freqs, fields.e_scat_rx, scene,
        provenance={"source": "synthetic-forward", "solver": solver,
                    "seed": _seed(cfg, args), "config": str(args.config)},
    )
    export_bundle(bundle, args.out)
    print(f"wrote bundle with shape {bundle.shape} to {args.out}")
    return EXIT_OK


def _templates_from_config(cfg):
    names = cfg.get("surrogate", {}).get("templates", ["foamdielint", "foamdielext"])
    templates = {}
    for name in names:
        if name not in SCENE_TEMPLATES:
            raise ConfigurationError(f"unknown scene template {name!r}")
        templates[name] = SCENE_TEMPLATES[name]()
    return templates


def cmd_gen_train(args):
    cfg = load_config(args.config)
    grid, sensors, freqs = _geometry_from_config(cfg)
    ops = build_greens(grid, sensors, freqs)
    e_inc = incident_field(sensors, grid, freqs, at_receivers=False)
    templates = _templates_from_config(cfg)
    n_per = int(cfg.get("surrogate", {}).get("n_per_config", 100))
    seed = _seed(cfg, args)
    ts = generate_training_set(
        templates, grid, sensors, freqs, ops, e_inc.e_inc_domain,
        n_per_config=n_per, seed=seed,
        solver_method=cfg.get("forward", {}).get("solver", "direct"),
    )
    np.savez_compressed(
        args.out,
        eps_maps=ts.eps_maps,
        fields=ts.fields,
        grid=np.array([grid.nx, grid.ny, grid.extent_x, grid.extent_y]),
        tx=sensors.tx_positions, rx=sensors.rx_positions,
        freqs=freqs.frequencies_hz,
        provenance=json.dumps(ts.provenance),
        seed=seed,
    )
    print(f"wrote {ts.n_samples} training samples to {args.out}")
    return EXIT_OK


def _training_set_from_npz(path):
    from .domain import SensorArray

    with np.load(path, allow_pickle=False) as data:
        g = data["grid"]
        grid = ImagingGrid(int(g[0]), int(g[1]), float(g[2]), float(g[3]))
        sensors = SensorArray(data["tx"], data["rx"])
        freqs = FrequencySet(data["freqs"])
        return TrainingSet(
            eps_maps=data["eps_maps"],
            fields=data["fields"],
            grid=grid, sensors=sensors, freqs=freqs,
            provenance=json.loads(str(data["provenance"])),
            seed=int(data["seed"]),
        )


def cmd_train_surrogate(args):
    cfg = load_config(args.config)
    ts = _training_set_from_npz(args.train_set)
    s_cfg = cfg.get("surrogate", {})
    hyper = SurrogateHyper(
        hidden=tuple(s_cfg.get("layers", [512, 512])),
        learning_rate=float(s_cfg.get("lr", 1e-3)),
        batch_size=int(s_cfg.get("batch", 16)),
        max_epochs=int(s_cfg.get("epochs", 2000)),
        patience=int(s_cfg.get("patience", 100)),
    )
    model = train(ts, hyper, seed=_seed(cfg, args))
    save_surrogate(model, args.out)
    print(
        f"trained surrogate: best val MSE {model.manifest['best_val_mse_normalized']:.3e} "
        f"(epoch {model.manifest['best_epoch']}) -> {args.out}"
    )
    return EXIT_OK


def cmd_invert(args):
    cfg = load_config(args.config)
    bundle = load_bundle(args.data)
    sensors = bundle.sensor_array()
    grid_cfg = cfg.get("grid", {})
    grid = ImagingGrid(
        nx=int(grid_cfg.get("nx", 32)), ny=int(grid_cfg.get("ny", 32)),
        extent_x=float(grid_cfg.get("extent", 0.15)),
        extent_y=float(grid_cfg.get("extent", 0.15)),
    )
    freqs = FrequencySet(bundle.frequencies_hz)
    ops = build_greens(grid, sensors, freqs)
    e_inc = incident_field(sensors, grid, freqs, at_receivers=False)
    decomp = decompose(ops, _cutoff_from_config(cfg))
    inv_cfg = _inversion_config(cfg, args)
    surrogate = None
    if inv_cfg.surrogate_mode == "neural":
        model_path = args.model or cfg.get("surrogate", {}).get("model")
        if not model_path:
            raise ConfigurationError("neural mode needs --model or surrogate.model")
        surrogate = load_surrogate(model_path)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    state = run(bundle.e_scat, e_inc.e_inc_domain, ops, decomp, inv_cfg, surrogate=surrogate)
    elapsed = time.time() - t0

    save_contrast_map(state.chi, out / "chi.csv")
    write_cost_trace(state.cost_history, out / "cost_trace.csv")
    write_lambda_trace(state.lambda_history, out / "lambda_trace.csv")
    render_permittivity(state.chi, out / "permittivity.png")
    record = {
        "schema": "scatlab-run/1",
        "config": cfg,
        "config_path": str(args.config),
        "data": str(args.data),
        "seed": _seed(cfg, args),
        "iterations": state.iteration,
        "converged": state.converged,
        "reason": state.reason,
        "elapsed_seconds": elapsed,
        "geometry_hash": geometry_hash(grid, sensors, freqs),
        "final_cost": state.cost_history[-1].as_dict() if state.cost_history else None,
    }
    if bundle.scene is not None:
        truth = rasterize(bundle.scene, grid)
        report = nse(state.chi, truth)
        record["nse"] = report.nse
        save_contrast_map(truth, out / "truth.csv")
    (out / "run_record.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    msg = f"inversion finished in {state.iteration} iterations ({elapsed:.1f}s)"
    if "nse" in record:
        msg += f", NSE {record['nse']:.4f}"
    print(msg)
    return EXIT_OK


def cmd_eval(args):
    est = load_contrast_map(args.estimate)
    truth = load_contrast_map(args.truth)
    report = nse(est, truth)
    print(f"NSE = {report.nse:.17g}")
    return EXIT_OK


def cmd_import_fresnel(args):
    column_map = parse_column_map(args.column_map) if args.column_map else None
    bundle = import_fresnel(args.input, radius_m=args.radius, column_map=column_map)
    export_bundle(bundle, args.out)
    K, P, Q = bundle.shape
    print(f"imported {K} frequencies x {P} transmitters x {Q} receivers -> {args.out}")
    return EXIT_OK


def cmd_render(args):
    src = Path(args.input)
    if src.is_dir():
        chi = load_contrast_map(src / "chi.csv")
    else:
        chi = load_contrast_map(src)
    render_permittivity(chi, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _add_common(parser):
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--beta", type=float, default=None)
    parser.add_argument("--termination-tol", "--T", dest="termination_tol",
                        type=float, default=None)
    parser.add_argument("--max-iters", type=int, default=None)
    parser.add_argument("--calibration-mode", choices=["none", "joint", "per_tx"],
                        default=None)
    parser.add_argument("--lambda-domain", choices=["real", "complex"], default=None)
    parser.add_argument("--surrogate-mode", choices=["exact_forward", "neural"],
                        default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scatlab",
        description="Quantitative microwave imaging with data-driven calibration",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="simulate a scene into a dataset bundle")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gen-train", help="generate surrogate training samples")
    _add_common(p)
    p.add_argument("--out", required=True, help="output .npz path")
    p.set_defaults(func=cmd_gen_train)

    p = sub.add_parser("train-surrogate", help="train the neural forward surrogate")
    _add_common(p)
    p.add_argument("--train-set", required=True, help="training .npz from gen-train")
    p.add_argument("--out", required=True, help="output model path")
    p.set_defaults(func=cmd_train_surrogate)

    p = sub.add_parser("invert", help="reconstruct permittivity from a bundle")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset bundle directory")
    p.add_argument("--model", default=None, help="surrogate model for neural mode")
    p.add_argument("--out", required=True, help="output run directory")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("eval", help="NSE between two contrast map files")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("import-fresnel", help="import laboratory text data")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=1.67)
    p.add_argument("--column-map", default=None,
                   help='e.g. "tx=0,rx=1,freq=2,re_total=3,im_total=4,re_incident=5,im_incident=6"')
    p.set_defaults(func=cmd_import_fresnel)

    p = sub.add_parser("render", help="render a permittivity map to PNG")
    p.add_argument("--input", required=True, help="chi.csv or run directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, GeometryError) as exc:
        _emit_error("config", exc)
        return EXIT_CONFIG
    except (ParseError, DataError) as exc:
        _emit_error("data", exc)
        return EXIT_DATA
    except (DivergenceError, ScatlabError) as exc:
        _emit_error("runtime", exc)
        return EXIT_RUNTIME


def _emit_error(kind, exc):
    payload = {"error": {"kind": kind, "type": type(exc).__name__, "message": str(exc)}}
    details = getattr(exc, "details", None)
    if details:
        payload["error"]["details"] = details[:20]
    print(json.dumps(payload), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
