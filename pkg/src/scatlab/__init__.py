"""scatlab: quantitative microwave imaging with data-driven calibration.

Library layout:
    domain      grids, sensors, frequencies, contrast maps, scenes
    forward     Method-of-Moments forward solver (2D TM)
    subspace    SVD signal-subspace split of the receiver operator
    inversion   alternating contrast-source inversion driver and NSE metric
    calibration per-transmitter complex calibration factors via CGD
    surrogate   feed-forward neural stand-in for the forward solve
    dataio      dataset bundles, importer, config files, rendering
    cli         command-line pipeline
"""

__version__ = "0.1.0"

from .domain import (  # noqa: F401
    CONVENTION,
    Annulus,
    Circle,
    ContrastMap,
    FrequencySet,
    ImagingGrid,
    PhysicalConstants,
    SceneSpec,
    SensorArray,
    circular_sensors,
    foam_diel_ext_scene,
    foam_diel_int_scene,
    fresnel_geometry,
    geometry_hash,
    rasterize,
)
from .forward import (  # noqa: F401
    FieldSet,
    GreensOperators,
    SolverReport,
    apply_state_operator,
    build_greens,
    forward_solve,
    incident_field,
    radiate,
    simulate_scattered_fields,
)
from .subspace import CutoffRule, SubspaceDecomposition, decompose, dominant_current  # noqa: F401
from .inversion import CostBreakdown, InversionConfig, InversionState, cost, nse, run  # noqa: F401
from .calibration import CalibrationProblem, CalibrationState  # noqa: F401
from .surrogate import (  # noqa: F401
    Surrogate,
    SurrogateHyper,
    TrainingSet,
    generate_training_set,
    load_surrogate,
    predict,
    save_surrogate,
    train,
)
