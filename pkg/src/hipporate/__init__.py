"""hipporate: automatic rating of incomplete hippocampal inversion from 3D
gray-matter maps, with the agreement statistics to evaluate it."""

__version__ = "0.1.0"

from .volumes import Volume3D, RoiPreset, ROI_PRESETS, crop_roi, flip_lr  # noqa: F401
from .nifti import read_nifti, write_nifti, load_volume, save_volume  # noqa: F401
from .phantom import PhantomParams, gen_phantom  # noqa: F401
from .scoring import (  # noqa: F401
    CriterionScores,
    HemisphereScores,
    classify_ihi,
    composite,
    round_criterion,
)
from .models import ModelSpec, TrainedModel, build, predict, saliency, threshold_top_k  # noqa: F401
from .training import TrainConfig, TrainLog, train, mse_loss, adam_step  # noqa: F401
from .ridge import RidgeConfig, fit_ridge, nested_cv_predict  # noqa: F401
from .cohort import SubjectRecord, SplitAssignment, ks_statistic, stratified_split  # noqa: F401
from .stats import (  # noqa: F401
    BootstrapResult,
    RatingPairs,
    bootstrap_metric,
    cohen_kappa,
    icc,
    paired_difference_test,
)
