"""Expression-invariant matching of key-point descriptor ensembles.

Same-identity descriptors under different expressions are learned as
equivalence relations, different identities as identity relations; both
are embedded as a graph in descriptor space, and matching scores
probe/gallery pairs by a minimum-norm search over bounded graph paths.
"""

from .correspondence import (
    CorrespondenceParams,
    CorrespondencePair,
    CorrespondenceSet,
    RigidTransform,
    correspond_ensembles,
    descriptor_dissimilarity,
    initial_correspondence,
    rigid_fit,
    split_inliers,
)
from .displacement import (
    change_expression,
    change_identity,
    equivalence_map,
    invariant_displacement,
)
from .errors import (
    BridgingError,
    ConfigError,
    CorrespondenceError,
    DataFormatError,
    DegenerateGeometryError,
    DimensionError,
    DisconnectedGraphError,
    EqGraphError,
    GateError,
    GraphBuildError,
    KindMismatchError,
    ModelFormatError,
)
from .estimator import ExpressionInvariantMatcher
from .io import (
    load_ensembles,
    load_model,
    read_labels_csv,
    read_matrix_csv,
    save_model,
    write_descriptor_records,
    write_labels_csv,
    write_matrix_csv,
    write_truth_json,
)
from .graphbuild import (
    BuildParams,
    Model,
    StarGraph,
    WeightedGraph,
    build_collection_graph,
    build_model,
    choose_bridging,
    fiedler_bipartition,
    fiedler_value,
    link_collections,
    plan_ensemble_pairs,
    refine_equivalence_sets,
)
from .matching import (
    DescriptorIndex,
    GateAssignment,
    MatchParams,
    MatchResult,
    assign_collection,
    assign_gates,
    build_index,
    dissimilarity_matrix,
    match_ensembles,
    pair_measure,
    pair_path_measure,
    refine_assignments,
)
from .metrics import LabeledMatrix, cmc_curve, roc_curve, vr_at_far
from .pca import DescriptorPca, PcaBasis, pca_fit, pca_project
from .synth import (
    SyntheticTruth,
    WorldConfig,
    brute_knn,
    exact_path_oracle,
    generate_probe_ensembles,
    generate_world,
    partition_quality,
)
from .types import (
    EXPRESSION_CHANGE,
    IDENTITY_CHANGE,
    NEUTRAL,
    Collection,
    Descriptor,
    Displacement,
    Ensemble,
    EquivalenceSet,
)

__version__ = "0.1.0"
