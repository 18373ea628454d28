"""Universal domain adaptation on precomputed vision-language embeddings."""

from .core import PredictionConfig, cross_entropy, entropy, im_loss, normalized_entropy, predict
from .gmm import GmmParams, Threshold, fit_gmm, intersection_threshold, predict_known, select_threshold
from .metrics import EvalReport, ScenarioSplit, auroc, h3_score, h_score, nmi_private, per_class_accuracy
from .refine import Adapter, TrainConfig, forward, grad_loss_all, loss_all, train
from .scoring import EntropyVectors, ScoreSet, entropy_vectors, score
from .search import ClassCountEstimate, SearchConfig, SearchState, greedy_step, init_state, loss_for, run_search
from .store import EmbeddingMatrix, Manifest, SimilarityCache, build_similarity_cache, l2_normalize, load_embeddings, save_embeddings
from .synth import SynthConfig, generate

__version__ = "0.1.0"
