"""Shared small geometries; session-scoped so operators build once."""

import numpy as np
import pytest

from scatlab.domain import (
    FrequencySet,
    ImagingGrid,
    circular_sensors,
    foam_diel_ext_scene,
    rasterize,
)
from scatlab.forward import build_greens, incident_field, simulate_scattered_fields
from scatlab.subspace import CutoffRule, decompose


@pytest.fixture(scope="session")
def small_setup():
    """12x12 grid, one frequency, 4 Tx / 24 Rx: fast unit-test geometry."""
    grid = ImagingGrid(12, 12, 0.12, 0.12)
    freqs = FrequencySet([3e9])
    sensors = circular_sensors(1.2, 4, 24)
    operators = build_greens(grid, sensors, freqs)
    fields = incident_field(sensors, grid, freqs, at_receivers=True)
    return {
        "grid": grid,
        "freqs": freqs,
        "sensors": sensors,
        "operators": operators,
        "e_inc": fields,
    }


@pytest.fixture(scope="session")
def foam_setup():
    """24x24 two-disk scene with simulated data; inversion-scale fixture."""
    grid = ImagingGrid(24, 24, 0.15, 0.15)
    freqs = FrequencySet([3e9])
    sensors = circular_sensors(1.67, 8, 64)
    operators = build_greens(grid, sensors, freqs)
    fields = incident_field(sensors, grid, freqs, at_receivers=False)
    truth = rasterize(foam_diel_ext_scene(), grid)
    data = simulate_scattered_fields(truth, operators, fields.e_inc_domain, method="direct")
    decomp = decompose(operators, CutoffRule())
    return {
        "grid": grid,
        "freqs": freqs,
        "sensors": sensors,
        "operators": operators,
        "e_inc": fields,
        "truth": truth,
        "data": data,
        "decomp": decomp,
    }
