"""treeprox: tree-based learners and effect analysis for event-proximity data."""

__version__ = "0.1.0"

from .errors import ConfigurationError, InputDataError, NumericalError, TreeproxError
from .geo import EARTH_RADIUS_KM, Event, GeoPoint, featurize, haversine_km
from .dataset import (
    CategoricalSpec,
    FeatureTable,
    ObservationSchema,
    Observations,
    assemble_table,
    load_events,
    load_gazetteer,
    load_observations,
    split,
)
from .cart import GrowControls, RegressionTree, fit_cv, grow, prune_path, prune_select
from .baselines import LinearModel, fit_lasso, fit_ols, lasso_path, threshold_dummies
from .forest import ForestModel, fit_forest, oob_mse, oob_predictions
from .importance import ImportanceReport, local_importance, mse, permutation_importance
from .bart import (
    BartFit,
    PosteriorMeanPredictor,
    PosteriorPredictive,
    fit_bart,
    pack_fit,
    predict_posterior,
    unpack_fit,
)
from .effects import (
    EffectCurve,
    apply_overrides,
    default_grid,
    grid_range,
    pick_profile,
    sweep,
)
from .simulate import (
    AttributeMarginals,
    DgpSpec,
    DgpTerm,
    apply_dgp,
    benchmark_features,
    default_complex_dgp,
    default_linear_dgp,
    gen_events,
    gen_population,
    median_mse,
    replication_data,
    results_to_csv,
    run_benchmark,
    synthetic_gazetteer,
)

__all__ = [
    "ConfigurationError",
    "InputDataError",
    "NumericalError",
    "TreeproxError",
    "EARTH_RADIUS_KM",
    "Event",
    "GeoPoint",
    "featurize",
    "haversine_km",
    "CategoricalSpec",
    "FeatureTable",
    "ObservationSchema",
    "Observations",
    "assemble_table",
    "load_events",
    "load_gazetteer",
    "load_observations",
    "split",
    "GrowControls",
    "RegressionTree",
    "fit_cv",
    "grow",
    "prune_path",
    "prune_select",
    "LinearModel",
    "fit_lasso",
    "fit_ols",
    "lasso_path",
    "threshold_dummies",
    "ForestModel",
    "fit_forest",
    "oob_mse",
    "oob_predictions",
    "ImportanceReport",
    "BartFit",
    "PosteriorMeanPredictor",
    "PosteriorPredictive",
    "fit_bart",
    "pack_fit",
    "predict_posterior",
    "unpack_fit",
    "local_importance",
    "mse",
    "permutation_importance",
    "EffectCurve",
    "apply_overrides",
    "default_grid",
    "grid_range",
    "pick_profile",
    "sweep",
    "AttributeMarginals",
    "DgpSpec",
    "DgpTerm",
    "apply_dgp",
    "benchmark_features",
    "default_complex_dgp",
    "default_linear_dgp",
    "gen_events",
    "gen_population",
    "median_mse",
    "replication_data",
    "results_to_csv",
    "run_benchmark",
    "synthetic_gazetteer",
    "__version__",
]
