"""Discrete choice modeling over spatially correlated alternatives.

A library and CLI for choice models whose alternatives live on a graph:
the classical logit family (multinomial, nested, paired-nest spatial
logit), their one-layer message-passing reformulations, and graph-network
utility models that generalize both, plus training, cross-validation, and
elasticity-based interpretation tools.
"""

from .data import (
    ChoiceDataset,
    FeatureSpec,
    FoldPlan,
    InteractionRule,
    SynthConfig,
    default_feature_spec,
    load_dataset,
    make_folds,
    standardize,
    synthesize,
    unstandardize,
)
from .errors import (
    ConfigError,
    DataError,
    GraphError,
    LineSearchError,
    NumericalError,
    ShapeError,
    SpatialChoiceError,
)
from .graph import (
    AlternativeGraph,
    NeighborhoodIndex,
    NestStructure,
    build_graph,
    equal_allocation,
    khop_neighbors,
    load_edge_csv,
    neighborhood_index,
    nests_to_graph,
    scl_pair_nests,
)
from .interpret import (
    ElasticityReport,
    ICECurve,
    SubstitutionMap,
    elasticity,
    elasticity_report,
    ice_curve,
    khop_constancy_check,
    substitution_map,
)
from .models import (
    FittedModel,
    GNNSpec,
    MNLSpec,
    NLSpec,
    SCLSpec,
    gnn_forward,
    init_params,
    mnl_probs,
    nl_probs_closed,
    nl_probs_mp,
    scl_probs_closed,
    scl_probs_mp,
)
from .training import (
    FitResult,
    MetricReport,
    Metrics,
    TrainConfig,
    compute_metrics,
    cross_validate,
    evaluate,
    fit,
    mnl_inference_stats,
    nll,
)

__version__ = "0.1.0"
