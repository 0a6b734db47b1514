"""Dense 3D neural-network primitives with hand-written backward passes."""

from .gradcheck import GradcheckReport, gradcheck
from .init import LayerParams, xavier_init
from .optim import SGD, sgd_step

__all__ = ["GradcheckReport", "LayerParams", "SGD", "gradcheck", "sgd_step", "xavier_init"]
