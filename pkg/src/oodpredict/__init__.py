"""Predict a classifier's out-of-distribution test error from unlabeled samples.

The central metric retrains a model on its own pseudo-labels for the shifted
data and measures how far the result lands from a reference model in
parameter space; logit-based baselines, the linear theory behind the method,
and an evaluation/stress harness round out the toolkit.
"""

from .data import (
    AttackSpec,
    GaussianShiftSpec,
    LabeledDataset,
    ShiftFamily,
    gen_blobs,
    gen_feature_corruption,
    gen_gaussian_shift,
    gen_label_shift,
    load_csv,
    pgd_attack,
    save_csv,
)
from .evaluation import (
    EvalReport,
    PredictionRecord,
    calibrate_and_predict,
    ensemble_zscore,
    fit_eval,
    residual_correlation,
    spearman_rho,
)
from .metrics import (
    ATCState,
    ProjNormConfig,
    ProjNormRun,
    agree_score,
    atc_fit,
    atc_score,
    conf_score,
    entropy_score,
    proj_norm,
    proj_norm_linear,
    pseudo_label,
)
from .models import (
    Architecture,
    ParamVector,
    TrainConfig,
    init_model,
    input_gradients,
    linearized_features,
    param_distance,
    predict_class,
    predict_logits,
    test_error,
    train_sgd,
)
from .numerics import (
    RankDeficiencyError,
    RowSpaceProjector,
    SpectralDecomposition,
    covariance_eig,
    min_norm_solve,
    project,
    row_space_projector,
)
from .theory import (
    AlignmentMatrix,
    BoundReport,
    SyntheticLinearTask,
    alignment_matrix,
    check_norm_assumption,
    check_spectral_assumption,
    construct_instance,
    eigen_spectrum,
    test_loss,
    verify_prop1,
)

__version__ = "0.1.0"
