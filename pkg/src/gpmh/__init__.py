"""Surrogate-accelerated Metropolis-Hastings for simulation-based posteriors.

A Gaussian-process surrogate of the log-posterior, built by upper-confidence-
bound acquisition, screens random-walk proposals so the expensive forward
simulation only runs on candidates the surrogate would accept.  The package
ships a desk-scale excitable-tissue forward model with a linear lead readout
as the demonstration problem, plus convergence diagnostics and a CLI covering
the full synthetic-study workflow.
"""

from .forward_model import (
    APParams,
    GridGeometry,
    LeadField,
    Observation,
    RegionPartition,
    SimulationResult,
    StimulusProtocol,
    add_noise,
    block_stimulus,
    build_grid,
    build_lead_field,
    circle_electrodes,
    corner_block_stimulus,
    expand_parameters,
    measure_ecg,
    partition_grid,
    simulate_ap,
)
from .gp_surrogate import (
    AcquisitionConfig,
    GPModel,
    KernelHyper,
    TrainingSet,
    acquire_next,
    build_surrogate,
    fit_gp,
    load_checkpoint,
    matern52,
    optimize_hypers,
    predict,
    save_checkpoint,
    ucb,
)
from .posterior import (
    CallablePosterior,
    PosteriorContext,
    estimate_sigma_e,
    log_prior,
)
from .samplers import (
    ChainState,
    MarkovChain,
    MixtureInit,
    ProposalConfig,
    fit_mixture,
    mh_step,
    postprocess,
    run_chains,
    slice_sample_surrogate,
    tune_proposal,
    two_stage_step,
)
from .diagnostics import (
    DiagnosticsReport,
    PosteriorSummary,
    autocorr_ess,
    gelman_rubin,
    geweke,
    make_report,
    summarize,
    switching_score,
)

__version__ = "0.1.0"
