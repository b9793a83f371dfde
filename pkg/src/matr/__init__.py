"""Video-to-video moment retrieval with dual-stage soft-DTW alignment."""
from .alignment import AlignmentResult, align, alignment_loss, cosine_cost, extract_span, hard_dtw, soft_dtw
from .datakit import FeatureSequence, SyntheticConfig, gen_synthetic
from .decoding import Segment, decode_segments, nms_1d, select_top1
from .estimator import MomentRetriever
from .metrics import EvalReport, evaluate
from .model import MATRNetwork, ModelConfig
from .objectives import LossWeights, MomentLabels

__version__ = "0.1.0"

__all__ = [
    "AlignmentResult", "EvalReport", "FeatureSequence", "LossWeights", "MATRNetwork",
    "ModelConfig", "MomentLabels", "MomentRetriever", "Segment", "SyntheticConfig",
    "align", "alignment_loss", "cosine_cost", "decode_segments", "evaluate", "extract_span",
    "gen_synthetic", "hard_dtw", "nms_1d", "select_top1", "soft_dtw",
]
