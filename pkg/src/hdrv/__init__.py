"""HDR video reconstruction from alternating-exposure LDR sequences.

Classical two-stage alignment (global offset-basis warp, then pyramidal
block matching driving an adaptive separable convolution) followed by
well-exposedness weighted fusion, plus HDR quality and dataset metrics.
"""

from .errors import (DecodeError, DegenerateInputError, DomainError, HdrvError, NumericError, ParameterError,
                     ValidationError)
from .imagecore import Domain, Image, Pyramid, build_pyramid, load_image, resample, save_image, to_luminance
from .radiometry import (AlternatingSequence, ExposureSpec, InputFrame, MultiExposureStack, ldr_to_linear,
                         linear_to_ldr, make_alternating_sequence, merge_stack_to_hdr, mu_l1_loss, mu_tonemap,
                         simulate_exposure_stack)

__version__ = "0.1.0"

__all__ = [
    "AlternatingSequence", "DecodeError", "DegenerateInputError", "Domain", "DomainError", "ExposureSpec",
    "HdrvError", "Image", "InputFrame", "MultiExposureStack", "NumericError", "ParameterError", "Pyramid",
    "ValidationError", "build_pyramid", "ldr_to_linear", "linear_to_ldr", "load_image",
    "make_alternating_sequence", "merge_stack_to_hdr", "mu_l1_loss", "mu_tonemap", "resample", "save_image",
    "simulate_exposure_stack", "to_luminance",
]
