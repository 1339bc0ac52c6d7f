"""
Train and test time augmentation and the aspect preserving resize to the network input size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy import ndimage

from .dataset import Sample

if TYPE_CHECKING:
    from .recognizer import DecodeResult

# Images wider than this ratio are rotated by a small angle at test time, all others by a right angle
TTA_ASPECT_THRESHOLD = 1.3
TTA_SMALL_ANGLE = 5.0
TTA_LARGE_ANGLE = 90.0


@dataclass(frozen=True)
class AugmentPolicy:
    train_fraction: float = 0.4
    resize_range: tuple[float, float] = (0.7, 1.0)
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)
    distortion_magnitude: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.train_fraction <= 1:
            raise ValueError(f"The augmented fraction must lie in [0, 1], got {self.train_fraction}")
        low, high = self.resize_range
        if not 0 < low <= high <= 1:
            raise ValueError(f"Invalid resize range {self.resize_range}")
        low, high = self.blur_sigma_range
        if not 0 <= low <= high:
            raise ValueError(f"Invalid blur range {self.blur_sigma_range}")
        if not 0 <= self.distortion_magnitude < 0.5:
            raise ValueError(f"Invalid distortion magnitude {self.distortion_magnitude}")


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """
    Bilinear resize of a 2-D image to `(width, height)`. Pixel centers are aligned, so an unchanged size is the
    identity.
    """
    width, height = size
    scale_y = image.shape[0] / height
    scale_x = image.shape[1] / width
    resized = ndimage.affine_transform(
        image.astype(np.float64),
        np.array([scale_y, scale_x]),
        offset=(0.5 * scale_y - 0.5, 0.5 * scale_x - 0.5),
        output_shape=(height, width),
        order=1,
        mode="nearest",
    )
    return _to_uint8(resized) if image.dtype == np.uint8 else resized.astype(image.dtype)


def border_median(image: np.ndarray) -> float:
    border = np.concatenate([image[0], image[-1], image[:, 0], image[:, -1]])
    return float(np.median(border))


def resize_keep_aspect(
    image: np.ndarray, target: tuple[int, int] = (200, 64), fill: float | None = None
) -> np.ndarray:
    """
    Scale the image to fit into `target` = `(width, height)` and center it. The remainder is filled with `fill`,
    by default the median of the border pixels.
    """
    height, width = image.shape
    if not height or not width:
        raise ValueError(f"Cannot resize an empty image of shape {image.shape}")
    target_width, target_height = target
    scale = min(target_width / width, target_height / height)
    new_width = min(target_width, max(1, int(round(width * scale))))
    new_height = min(target_height, max(1, int(round(height * scale))))
    resized = image if (new_width, new_height) == (width, height) else resize_image(image, (new_width, new_height))
    if (new_width, new_height) == (target_width, target_height):
        return resized.copy()
    result = np.full((target_height, target_width), border_median(image) if fill is None else fill)
    top = (target_height - new_height) // 2
    left = (target_width - new_width) // 2
    result[top : top + new_height, left : left + new_width] = resized
    return _to_uint8(result) if image.dtype == np.uint8 else result.astype(image.dtype)


def _homography(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """
    The 3x3 projective matrix mapping the four `source` points onto the `target` points.
    """
    system = []
    values = []
    for (x, y), (u, v) in zip(source, target):
        system.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        system.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        values.extend([u, v])
    coefficients = np.linalg.solve(np.array(system, dtype=np.float64), np.array(values, dtype=np.float64))
    return np.append(coefficients, 1.0).reshape(3, 3)


def perspective_jitter(image: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """
    Move every image corner by up to `magnitude` times the image size and warp the image accordingly.
    """
    height, width = image.shape
    corners = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], dtype=np.float64)
    jitter = rng.uniform(-magnitude, magnitude, corners.shape) * np.array([width, height])
    matrix = _homography(corners, corners + jitter)
    rows, columns = np.mgrid[0:height, 0:width].astype(np.float64)
    points = matrix @ np.stack([columns.ravel(), rows.ravel(), np.ones(rows.size)])
    source_x = (points[0] / points[2]).reshape(height, width)
    source_y = (points[1] / points[2]).reshape(height, width)
    return ndimage.map_coordinates(image.astype(np.float64), [source_y, source_x], order=1, mode="nearest")


def augment_train(
    sample: Sample, policy: AugmentPolicy, rng: np.random.Generator | None = None
) -> Sample:
    """
    With probability `policy.train_fraction` downscale and upscale the image, blur it and warp its corners. The
    label is never changed.
    """
    rng = np.random.default_rng(policy.seed) if rng is None else rng
    if not rng.random() < policy.train_fraction:
        return sample
    image = sample.image.astype(np.float64)
    height, width = image.shape
    factor = rng.uniform(*policy.resize_range)
    small = resize_image(image, (max(1, int(round(width * factor))), max(1, int(round(height * factor)))))
    image = resize_image(small, (width, height))
    sigma = rng.uniform(*policy.blur_sigma_range)
    if sigma > 0:
        image = ndimage.gaussian_filter(image, sigma)
    if policy.distortion_magnitude > 0:
        image = perspective_jitter(image, policy.distortion_magnitude, rng)
    return Sample(_to_uint8(image), sample.label)


def rotate_image(image: np.ndarray, angle: float) -> np.ndarray:
    """
    Rotate about the center, keeping the size. Uncovered corners are 0.
    """
    return ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0)


def tta_variants(image: np.ndarray) -> list[np.ndarray]:
    """
    Returns the original and two rotated copies. Wide images are rotated by +-5 degrees, all others by +-90 degrees.
    """
    height, width = image.shape[:2]
    angle = TTA_SMALL_ANGLE if width > TTA_ASPECT_THRESHOLD * height else TTA_LARGE_ANGLE
    return [image.copy(), rotate_image(image, angle), rotate_image(image, -angle)]


def select_tta_prediction(candidates: Sequence[DecodeResult]) -> DecodeResult:
    """
    The candidate with the highest mean character probability. Empty words score 0 and ties keep the earlier
    candidate, so the prediction of the unrotated image wins a tie.
    """
    if not candidates:
        raise ValueError("select_tta_prediction: at least one candidate is required")
    best = candidates[0]
    for candidate in candidates[1:]:
        if candidate.score > best.score:
            best = candidate
    return best
