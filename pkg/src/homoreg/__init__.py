"""Multi-response GLMs with row sparsity, low rank and column clustering."""
from .families import (
    FAMILIES,
    Bernoulli,
    Dataset,
    GlmFamily,
    MultinomialLogit,
    Normal,
    Poisson,
    curvature_weight,
    get_family,
    link_value,
    mean_map,
    natural_parameters,
    neg_log_likelihood,
    nll_gradient,
)
from .optimizer import (
    Backtracking,
    DivergenceError,
    FitReport,
    FixedStep,
    Hyperparams,
    ModelState,
    default_init,
    fit,
    full_objective,
    hard_threshold_rows,
    update_A,
    update_clusters,
    update_U,
    update_V,
)
from .penalty import Membership, build_laplacian, fusion_penalty, kmeans_penalty
from .simulation import (
    CvGrid,
    SimConfig,
    cross_validate,
    evaluate,
    kl_divergence,
    seq_e,
    simulate,
    theoretical_rate,
    zeta_n_sq,
)
from .surrogate import SurrogateProblem, build_surrogate, surrogate_objective

__version__ = "0.1.0"
