"""Probabilistic visual-word dictionaries and inference graphs for
neural-network activation dumps."""

from .bundle import ModelBundle
from .cooccur import CoocModel, count_cooccurrence, neighbor_classes, priors, transitions
from .errors import (AtlasError, BlobFormatError, ConfigError,
                     LabelsRequiredError, ManifestError)
from .geometry import FieldMap, StageSpec, compose, full_field, window
from .gmm import (HistClassifier, LayerGmm, assign, discriminative_fit, em_fit,
                  fit_em, fixed_output_gmm, hist_classifier_error, init_gmm,
                  responsibilities, top_m_examples)
from .miner import (InferenceGraph, build_graph, edge_heatmap,
                    image_word_locations, score, word_counts)
from .rect_hmm import (LayerPath, RectHmm, censored_moments, forward_backward,
                       hmm_em_fit, init_hmm, rg_log_emission, viterbi)
from .reports import Junction, SimilarityReport, junction, lda_project, similarity_report
from .synth import SynthSpec, sample_store, write_truth_bundle
from .tensor_store import (ActivationStore, TensorBlob, open_store, read_blob,
                           write_blob, write_store)

__version__ = "0.1.0"
