"""Stereo-depth liveness gating for face authentication.

The toolkit computes dense depth maps from rectified stereo pairs with a
classic block matcher, renders them as contrast-shaped gray images, decides
real-face vs. spoof with a small CNN trained from scratch, and only then
hands the RGB face to a pluggable embedding recognizer over an enrollment
gallery. A deterministic synthetic scene generator provides ground-truth
disparity for testing the matcher and labeled crops for training the
classifier.
"""

from stereoface.imaging import CameraRig, GrayImage, StereoPair
from stereoface.stereo import DepthMap, DisparityMap, MatchParams

__version__ = "0.1.0"

__all__ = [
    "CameraRig",
    "GrayImage",
    "StereoPair",
    "DisparityMap",
    "DepthMap",
    "MatchParams",
]
