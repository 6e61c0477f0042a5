"""Cross-modality self-supervised pre-training at desk scale.

Permutation-recovery pretext training with a Gumbel-Sinkhorn relaxation,
part-aware cycle-contrastive learning, supervised fine-tuning, and CMC/mAP
retrieval evaluation, all on a small numpy-backed autodiff core.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
