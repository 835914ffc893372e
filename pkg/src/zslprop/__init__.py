"""Zero-shot classification by label propagation over a semantic class graph."""

from .errors import (ConvergenceError, IllConditionedError, InvalidInputError, MalformedGraphError,
                     NonFiniteError, StageError, ZSLError)
from .propagation import (PropagationOperator, ScoreMatrix, build_operator, normalize_transition,
                          predict_labels, propagate_closed, propagate_iterative, row_mass,
                          theta_operator, transition_matrix)
from .seeder import FeatureDataset, LogRegModel, predict_proba, seed_matrix, train_logreg
from .semantic_graph import (ClassGraph, SemanticSpace, build_weight_matrix, edge_weight,
                             euclidean_distance, knn_neighbors)

__version__ = "0.1.0"
