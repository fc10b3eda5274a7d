"""Marginal likelihoods for probit-link mixed models.

Two interchangeable representations of each cluster's marginal likelihood --
a Gaussian-weighted integral and a multivariate normal CDF -- with six
approximation engines (Laplace, adaptive importance sampling, stochastic
spherical-radial rules, adaptive RQMC, GHQ, AGHQ, plus the randomized-lattice
CDF estimator), model builders for binomial, multinomial, ordered, and
survival families, and a benchmarking/fitting harness.
"""

from .errors import (
    BadDimension,
    CannotReachTarget,
    DimTooLarge,
    MonotonicityViolation,
    NoConvergence,
    NodeBudgetExceeded,
    NotApplicable,
    NotPositiveDefinite,
    ParseError,
    PrecisionNotReached,
    ProbitMlmError,
    SchemaMismatch,
    ZeroVector,
)
from .gwi import (
    AffineSpec,
    GwiProblem,
    McOptions,
    ModeResult,
    aghq,
    find_mode,
    ghq,
    ghq_rule,
    importance_sample,
    laplace,
    reduce_gwi_dimension,
    rqmc,
    spherical_radial,
)
from .harness import (
    FitOptions,
    FitResult,
    GroundTruthOptions,
    GroupedIsotropicCov,
    SimSpec,
    UnstructuredCov,
    benchmark,
    calibrate_method,
    cluster_loglik,
    fit_ml,
    ground_truth,
    load_csv,
    scaled_rmse,
    simulate_binomial,
    simulate_binomial_population,
    simulate_crossed_binary,
    simulate_multinomial,
)
from .models import (
    BinomialCluster,
    BuiltLikelihood,
    GsmCluster,
    MultinomialCluster,
    OrderedCluster,
    build_binomial,
    build_gsm,
    build_multinomial,
    build_ordered,
    ispline_basis,
    loglik_cdf,
    loglik_gradient,
    multinomial_integrand,
    time_design,
)
from .mvn import (
    ApproxResult,
    CdfOptions,
    HyperRect,
    mvn_cdf,
    mvn_cdf_grad,
    mvn_interval,
    reorder_variables,
    sov_integrand,
)
from .numeric import (
    EigenDecomp,
    cholesky,
    quasi_newton_minimize,
    std_normal_cdf,
    std_normal_logcdf,
    std_normal_quantile,
    sym_eigen,
)
from .sequences import (
    KorobovRule,
    SobolGenerator,
    antithetic_expand,
    korobov_points,
    sobol_points,
)
from .skewlink import (
    SkewParams,
    conditional_cdf,
    marginal_as_cdf,
    marginal_as_gwi,
    posterior_density,
)

__version__ = "0.1.0"
