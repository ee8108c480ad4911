from .config import DEFAULT_SIGMAS, PRESETS, ConfigError, Schedule, StageConfig, preset
from .data import TrainingData, View, substream
from .dip import fit_means, fit_scales, optimize_dip, scale_targets
from .gaussians import (
    DensifyResult,
    GaussianParams,
    TrainingDiverged,
    densify_and_prune,
    optimize_gaussians,
    prune,
    random_init,
    run_vanilla_gs,
)
from .optim import Adam, OptimizerState, adam_step
from .stages import (
    FitResult,
    StageResult,
    choose_pseudo,
    postprocess_gs,
    pseudo_cameras,
    pseudo_probability,
    run_coarse_to_fine,
    run_stage,
    total_iterations,
)
