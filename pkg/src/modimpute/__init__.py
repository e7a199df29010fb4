"""Missing-modality imputation by separating shared content from per-modality style."""

from .data import Cohort, SubjectRecord, SynthSpec, load_cohort, save_cohort, standardize, synth_cohort
from .imputer import ImputationPlan, impute_cohort, mean_impute
from .phase1 import ContentModel, Phase1Hyper, train_content
from .phase2 import Phase2Hyper, StylePair, train_all_styles, train_style

__version__ = "0.1.0"
