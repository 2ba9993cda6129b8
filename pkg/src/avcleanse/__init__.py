"""Two-step audio-visual cleansing of noisy identity labels."""

__version__ = "0.1.0"

from .boundary import BoundaryModel, TrialSet, predict, score_trials, train_boundary
from .cleansing import (
    CleansingReport, CoarsePartition, Scope, coarse_partition, fine_cleanse, run_pipeline,
)
from .embed_store import (
    EmbeddingSet, LabelMap, Modality, l2_normalize, load_embeddings, load_labels, write_embeddings,
)
from .errors import CleanseError, FormatError, LabelError, ModalityError
from .similarity import ScoreTable, build_score_table, intra_class_scores, pairwise_scores_bruteforce
from .synth import SynthConfig, generate
from .verification import Mode, ScoredTrialList, compute_eer, evaluate, fuse_embeddings
