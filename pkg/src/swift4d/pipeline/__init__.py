from .data import (
    AugmentSpec,
    SplitSpec,
    SubjectRecord,
    SubSequence,
    SynthSpec,
    augment,
    band_power_scores,
    fit_to_dims,
    load_dataset,
    mean_intensity_scores,
    normalize_and_fit,
    save_dataset,
    smooth_frames,
    split_subjects,
    subsequence_split,
    synthesize_dataset,
)
from .metrics import auc, balanced_accuracy, mae, mse, window_homogeneity
from .optim import AdamWHyper, adamw_step, init_adamw_state, lr_schedule
from .training import (
    MetricsLog,
    SubjectPrediction,
    TrainHyper,
    TrainingDiverged,
    TrainResult,
    evaluate,
    finetune,
    infer_subject,
    prepare_subjects,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
