"""Rotation-equivariant convolutions over the cyclic group C_N, rotated RoI
warping, a small reverse-mode autodiff tape and the harness that measures them.
"""

__version__ = "0.1.0"

from .group import CyclicGroup, RegularField, RRoI, act_on_field, act_on_rroi  # noqa: E402
from .layers import BackboneConfig, GConv, GroupBatchNorm, LiftConv, ReBackbone  # noqa: E402
from .roi import AlignSpec, riroi_align, rroi_align_spatial  # noqa: E402

__all__ = [
    "AlignSpec", "BackboneConfig", "CyclicGroup", "GConv", "GroupBatchNorm", "LiftConv",
    "RRoI", "ReBackbone", "RegularField", "act_on_field", "act_on_rroi", "riroi_align",
    "rroi_align_spatial", "__version__",
]
