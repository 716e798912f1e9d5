"""Single-stage weakly supervised segmentation mechanisms on numpy.

Score aggregation (nGWP with a focal size penalty), pixel-adaptive mask
refinement with pseudo ground truth, the stochastic gate with global cue
injection, their losses and hand-written gradients.
"""

from .gate import (GATE_MODES, GateConfig, GciParams, gate_infer, gate_train, gate_train_backward,
                   gci, gci_backward)
from .losses import (GradcheckError, LossValue, class_weights, gradcheck, multilabel_softmargin,
                     relative_error, weighted_seg_loss)
from .numerics import (ParameterError, Rng, ShapeError, global_max_pool, sigmoid,
                       softmax_over_channels, upsample_nearest)
from .pamr import (IGNORE, AffinityField, PamrConfig, PseudoLabels, affinity, extract_pseudo_gt,
                   local_sigma, refine, refine_sparse)
from .scores import (ClassifierWeights, FocalConfig, NgwpConfig, build_mask_probs, cam_maps,
                     classification_scores, classification_scores_backward, focal_penalty,
                     gap_scores, ngwp)

__version__ = "0.1.0"

__all__ = [
    "GATE_MODES", "GateConfig", "GciParams", "gate_infer", "gate_train", "gate_train_backward",
    "gci", "gci_backward",
    "GradcheckError", "LossValue", "class_weights", "gradcheck", "multilabel_softmargin",
    "relative_error", "weighted_seg_loss",
    "ParameterError", "Rng", "ShapeError", "global_max_pool", "sigmoid", "softmax_over_channels",
    "upsample_nearest",
    "IGNORE", "AffinityField", "PamrConfig", "PseudoLabels", "affinity", "extract_pseudo_gt",
    "local_sigma", "refine", "refine_sparse",
    "ClassifierWeights", "FocalConfig", "NgwpConfig", "build_mask_probs", "cam_maps",
    "classification_scores", "classification_scores_backward", "focal_penalty", "gap_scores", "ngwp",
]
