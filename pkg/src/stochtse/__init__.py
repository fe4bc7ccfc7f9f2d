"""Stochastic traffic state estimation from sparse loop detectors.

Reconstructs full space-time density and speed fields from a handful of
detector rows, with calibrated uncertainty. Two estimator families are
provided: an ensemble of physics-informed networks whose speed-density
closures sweep a percentile ladder, and a dual variational network
regularized by a density-conditioned Beta speed distribution.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    InsufficientDataError,
    LineageError,
    NumericalError,
    ParseError,
    ShapeError,
    ValidationError,
)
from .grids import (
    CollocationSet,
    NormalizationSpec,
    ObservationSet,
    TrafficGrid,
    equispaced_rows,
    export_grid,
    ingest_grid,
    make_normalizer,
    sample_collocation,
    sample_detectors,
)
from .percentile_fd import (
    DEFAULT_ALPHAS,
    OptimizerOptions,
    PercentileFD,
    PercentileFDFamily,
    SampleWeights,
    UnderwoodParams,
    achieved_percentile,
    below_curve_residual,
    bin_weights,
    calibrate_family,
    calibrate_percentile,
    export_family,
    import_family,
    percentile_objective,
    underwood_speed,
)
from .synthetic import (
    Scenario,
    apply_speed_noise,
    generate_synthetic_lwr,
    simulate_lwr,
)
from .stochastic_fd import (
    BetaProcess,
    IntervalStats,
    S3Params,
    VarianceCurve,
    beta_logpdf,
    beta_pdf,
    beta_sample,
    beta_shapes,
    export_process,
    export_spectrum,
    fit_beta_process,
    fit_s3,
    fit_variance_curve,
    import_process,
    interval_stats,
    s3_speed,
)
from .networks import (
    MLP,
    init_parameters,
    input_derivatives,
    load_checkpoint,
    save_checkpoint,
)
from .estimates import EstimateField, export_estimates, from_member_layers, import_estimates
from .percentile_pinn import (
    LossWeights,
    TrainingConfig,
    data_loss,
    physics_loss,
    predict_grid,
    train_family,
    train_member,
)
from .distribution_vae import (
    BetaLossWeights,
    DualVae,
    VaeConfig,
    VaeTrainingConfig,
    binned_kl,
    build_estimate_field,
    estimate_density,
    estimate_speed_samples,
    gaussian_kl,
    init_vae,
    physics_distribution_loss,
    train_beta_vae,
    vae_data_loss,
)
from .evaluation import (
    CoverageReport,
    MetricReport,
    ci_coverage,
    compute_metrics,
    full_mask,
    held_out_mask,
    reconstruct_fd_scatter,
    speed_histograms,
)
from .config import (
    RunConfig,
    ScenarioSpec,
    check_lineage,
    load_run_config,
    load_scenario,
    read_manifest,
    write_manifest,
)
