"""Linear-chain CRF gradients by forward-backward and by forward-only expectation-semiring passes."""

from .corpus import Corpus, SequenceInstance, parse_corpus, read_corpus, synth_corpus
from .emp import emp_gradient
from .fb import GradientResult, checkpoint_fb_gradient, fb_gradient, viterbi_decode
from .model import (
    CrfModel,
    LabelAlphabet,
    LatticeToken,
    build_transition_matrix,
    extract_features,
    load_model,
    save_model,
)

__version__ = "0.1.0"
