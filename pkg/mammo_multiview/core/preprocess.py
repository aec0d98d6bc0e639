"""
Breast localization and intensity normalization.

The breast is found by Otsu thresholding followed by the largest 4-connected
foreground component; the padded bounding box is cropped, resized bilinearly
to the configured size and min-max scaled to [0, 1].
"""

import logging
from typing import Optional

import cv2
import numpy as np

from ..config.settings import PreprocessConfig
from .errors import DegenerateImageError, EmptyForegroundError, IntegrityError
from .imaging import BoundingBox, GrayImage

logger = logging.getLogger(__name__)

N_BINS = 256

# real-valued grid of shape (target_height, target_width), values in [0, 1]
NormalizedRaster = np.ndarray


def intensity_bins(image: GrayImage) -> np.ndarray:
    """Map pixels to the 256-bin histogram domain (16-bit images keep the high byte)."""
    if image.bit_depth == 16:
        return (image.pixels >> 8).astype(np.intp)
    return image.pixels.astype(np.intp)


def otsu_threshold(image: GrayImage) -> int:
    """
    Otsu threshold over the 256-bin intensity histogram.

    Returns the bin ``t`` maximizing the between-class variance of the split
    {bins < t} / {bins >= t}. Thresholds inside a run of empty bins give the
    same split; the lowest of them is returned.

    Raises:
        DegenerateImageError: the image has a single intensity bin.
    """
    bins = intensity_bins(image)
    hist = np.bincount(bins.ravel(), minlength=N_BINS)
    if np.count_nonzero(hist) < 2:
        raise DegenerateImageError("Cannot threshold an image with a single intensity level")

    # OpenCV puts pixels > t in the foreground
    t, _ = cv2.threshold(bins.astype(np.uint8), 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    occupied = np.flatnonzero(hist[:int(t) + 1])
    return int(occupied[-1]) + 1


def breast_roi(image: GrayImage, pad_fraction: float = 0.02) -> BoundingBox:
    """
    Bounding box of the largest bright 4-connected component.

    The box is grown by ``pad_fraction`` of its own width/height on each side
    and clamped to the image.

    Raises:
        DegenerateImageError: constant image.
        EmptyForegroundError: nothing above the threshold.
    """
    threshold = otsu_threshold(image)
    mask = (intensity_bins(image) >= threshold).astype(np.uint8)
    n_labels, _, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=4)
    if n_labels < 2:
        raise EmptyForegroundError("No foreground pixels after thresholding")

    areas = stats[1:, cv2.CC_STAT_AREA]
    best = 1 + int(np.argmax(areas))
    x0 = int(stats[best, cv2.CC_STAT_LEFT])
    y0 = int(stats[best, cv2.CC_STAT_TOP])
    x1 = x0 + int(stats[best, cv2.CC_STAT_WIDTH])
    y1 = y0 + int(stats[best, cv2.CC_STAT_HEIGHT])

    pad_x = int(round(pad_fraction * (x1 - x0)))
    pad_y = int(round(pad_fraction * (y1 - y0)))
    return BoundingBox(
        x0=max(0, x0 - pad_x),
        y0=max(0, y0 - pad_y),
        x1=min(image.width, x1 + pad_x),
        y1=min(image.height, y1 + pad_y),
    )


def resize_bilinear(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment."""
    if grid.shape == (height, width):
        return grid.astype(np.float64)
    resized = cv2.resize(grid.astype(np.float32), (width, height), interpolation=cv2.INTER_LINEAR)
    return resized.astype(np.float64)


def preprocess_image(image: GrayImage, cfg: PreprocessConfig,
                     roi: Optional[BoundingBox] = None) -> NormalizedRaster:
    """
    Crop to the breast, resize to the target grid and scale to [0, 1].

    Args:
        image: Source image.
        cfg: Target size and ROI padding.
        roi: Precomputed box; the detector runs when omitted.

    Returns:
        Array of shape (cfg.target_height, cfg.target_width).

    Raises:
        IntegrityError: ``roi`` does not fit inside the image.
    """
    if roi is None:
        roi = breast_roi(image, cfg.pad_fraction)
    elif not roi.fits(image.width, image.height):
        raise IntegrityError(f"ROI {roi.as_tuple()} exceeds {image.width}x{image.height} image")

    crop = image.pixels[roi.y0:roi.y1, roi.x0:roi.x1].astype(np.float64)
    lo, hi = float(crop.min()), float(crop.max())
    if hi == lo:
        logger.warning("Constant crop %s; normalized raster is all zeros", roi.as_tuple())
        return np.zeros((cfg.target_height, cfg.target_width), dtype=np.float64)

    scaled = (crop - lo) / (hi - lo)
    return np.clip(resize_bilinear(scaled, cfg.target_height, cfg.target_width), 0.0, 1.0)
