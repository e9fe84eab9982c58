"""Dense object detector with border-aligned feature refinement, in numpy with numba kernels."""
from .border_align import PoolConfig, border_align, border_align_backward, border_align_forward
from .config import Config
from .detector import BorderDet

__all__ = ["BorderDet", "Config", "PoolConfig", "border_align", "border_align_backward", "border_align_forward"]
__version__ = "0.1.0"
