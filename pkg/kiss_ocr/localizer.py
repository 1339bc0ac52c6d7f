"""
The localization network. A recurrent head predicts one affine matrix per region of interest and a differentiable
bilinear sampler cuts the regions out of the input image. Sampling coordinates that leave the image are penalized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum, unique
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .backbone import Backbone, BackboneConfig, global_pool
from .dataset import write_pgm
from .layers import Linear, LSTMCell, Module
from .tensor import NonFiniteError, Tensor, matmul, record_op, relu, stack, transpose, zeros

THETA_SIZE = 6
# Both rotation/skew entries of the flattened 2x3 matrix
ROTATION_ENTRIES = (1, 3)


@unique
class LocalizerKind(Enum):
    LSTM = "lstm"
    TRANSFORMER = "transformer"
    REGULAR = "regular"


@dataclass(frozen=True)
class LocalizerConfig:
    """
    `roi_size` is `(width, height)` of a single crop.
    """

    n_rois: int = 23
    roi_size: tuple[int, int] = (50, 64)
    lstm_hidden: int = 256
    rotation_dropout: float = 0.05
    kind: LocalizerKind = LocalizerKind.LSTM

    def __post_init__(self) -> None:
        if self.n_rois < 1:
            raise ValueError(f"At least one region of interest is required, got {self.n_rois}")
        if min(self.roi_size) < 2:
            raise ValueError(f"The crop size must be at least 2x2, got {self.roi_size}")
        if self.lstm_hidden < 1:
            raise ValueError(f"Invalid LSTM hidden size {self.lstm_hidden}")
        if not 0 <= self.rotation_dropout <= 1:
            raise ValueError(f"The rotation dropout rate must lie in [0, 1], got {self.rotation_dropout}")


class AffineParams(NamedTuple):
    theta: Tensor  # (B, N, 2, 3)

    @property
    def n_rois(self) -> int:
        return self.theta.shape[1]


class SamplingGrid(NamedTuple):
    coords: Tensor  # (B, N, h_o, w_o, 2), (u, v) in [-1, 1]
    out_size: tuple[int, int]


class RoiBatch(NamedTuple):
    crops: Tensor  # (B*N, C, h_o, w_o)
    reg_penalty: Tensor
    params: AffineParams | None = None
    grid: SamplingGrid | None = None


def predict_affine(
    features: Tensor,
    lstm: LSTMCell,
    head: Linear,
    n_rois: int,
    dropout_rate: float,
    training: bool,
    rng: np.random.Generator | None = None,
) -> AffineParams:
    """
    Run the LSTM for `n_rois` steps on the same pooled feature vector and map every hidden state to a 2x3 matrix.

    While training, rotation dropout zeroes both rotation entries of a matrix with probability `dropout_rate`. The
    remaining entries are not rescaled.
    """
    if not 0 <= dropout_rate <= 1:
        raise ValueError(f"predict_affine: dropout rate must lie in [0, 1], got {dropout_rate}")
    if not np.all(np.isfinite(features.data)):
        raise NonFiniteError("predict_affine: the localization features contain non-finite values")
    batch = features.shape[0]
    hidden = zeros((batch, lstm.hidden_size))
    cell = zeros((batch, lstm.hidden_size))
    thetas = []
    for _ in range(n_rois):
        hidden, cell = lstm(features, (hidden, cell))
        thetas.append(head(hidden))
    theta = stack(thetas, axis=1)  # (B, N, 6)

    if training and dropout_rate > 0:
        if rng is None:
            raise ValueError("predict_affine: a random generator is required for rotation dropout")
        mask = np.ones(theta.shape, dtype=theta.dtype)
        dropped = rng.random((batch, n_rois)) < dropout_rate
        for entry in ROTATION_ENTRIES:
            mask[..., entry][dropped] = 0
        theta = theta * mask
    return AffineParams(theta.reshape(batch, n_rois, 2, 3))


def base_grid(out_size: tuple[int, int], dtype: type) -> np.ndarray:
    """
    The evenly spaced target grid in homogeneous coordinates, shape `(h_o * w_o, 3)`, row-major over `(y, x)`.
    """
    width, height = out_size
    grid_x, grid_y = np.meshgrid(np.linspace(-1, 1, width), np.linspace(-1, 1, height))
    return np.stack([grid_x, grid_y, np.ones_like(grid_x)], axis=-1).reshape(-1, 3).astype(dtype)


def generate_grid(params: AffineParams, out_size: tuple[int, int]) -> SamplingGrid:
    width, height = out_size
    if width < 2 or height < 2:
        raise ValueError(f"generate_grid: the output size must be at least 2x2, got {out_size}")
    theta = params.theta
    batch, n_rois = theta.shape[:2]
    points = Tensor(base_grid(out_size, theta.dtype), dtype=theta.dtype)
    coords = matmul(points, transpose(theta, (0, 1, 3, 2)))  # (B, N, P, 2)
    return SamplingGrid(coords.reshape(batch, n_rois, height, width, 2), (width, height))


def out_of_image_penalty(grid: SamplingGrid) -> Tensor:
    """
    `sum(|min(c + 1, 0)| + max(c - 1, 0))` over all coordinates of all grids, divided by the batch size.
    """
    coords = grid.coords
    penalty = relu(coords - 1.0) + relu(-coords - 1.0)
    return penalty.sum() * (1.0 / coords.shape[0])


def bilinear_sample(image: Tensor, grid: SamplingGrid) -> Tensor:
    """
    Sample `(B, C, H, W)` images at the normalized grid coordinates. The corner coordinates -1 and 1 map onto the
    centers of the outermost pixels, samples outside the image read 0.

    Returns
    -------
    Tensor
        The crops, shape `(B * N, C, h_o, w_o)`
    """
    coords = grid.coords
    batch, channels, height, width = image.shape
    if coords.ndim != 5 or coords.shape[0] != batch or coords.shape[-1] != 2:
        raise ValueError(f"bilinear_sample: grid of shape {coords.shape} does not match images of shape {image.shape}")
    _, n_rois, out_h, out_w, _ = coords.shape

    pixel_x = (coords.data[..., 0] + 1) * 0.5 * (width - 1)
    pixel_y = (coords.data[..., 1] + 1) * 0.5 * (height - 1)
    left = np.floor(pixel_x)
    top = np.floor(pixel_y)
    frac_x = pixel_x - left
    frac_y = pixel_y - top
    left = left.astype(np.int64)
    top = top.astype(np.int64)
    sample_index = np.arange(batch).reshape(batch, 1, 1, 1)
    pixels = image.data.transpose(0, 2, 3, 1).reshape(batch * height * width, channels)

    corners = []
    result = np.zeros((batch, n_rois, out_h, out_w, channels), dtype=image.dtype)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rows = top + dy
        columns = left + dx
        valid = (columns >= 0) & (columns < width) & (rows >= 0) & (rows < height)
        flat = (sample_index * height + np.clip(rows, 0, height - 1)) * width + np.clip(columns, 0, width - 1)
        values = pixels[flat] * valid[..., None]
        weight = (frac_y if dy else 1 - frac_y) * (frac_x if dx else 1 - frac_x)
        result += values * weight[..., None]
        corners.append((flat, valid, values, weight))
    crops = result.transpose(0, 1, 4, 2, 3).reshape(batch * n_rois, channels, out_h, out_w)

    def backward(grad: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        grad = grad.reshape(batch, n_rois, channels, out_h, out_w).transpose(0, 1, 3, 4, 2)
        grad_image = None
        if image.requires_grad:
            grad_pixels = np.zeros_like(pixels)
            for flat, valid, _, weight in corners:
                np.add.at(grad_pixels, flat.ravel(), (grad * (weight * valid)[..., None]).reshape(-1, channels))
            grad_image = grad_pixels.reshape(batch, height, width, channels).transpose(0, 3, 1, 2)
        grad_coords = None
        if coords.requires_grad:
            top_left, top_right, bottom_left, bottom_right = ((grad * values).sum(-1) for _, _, values, _ in corners)
            grad_x = (1 - frac_y) * (top_right - top_left) + frac_y * (bottom_right - bottom_left)
            grad_y = (1 - frac_x) * (bottom_left - top_left) + frac_x * (bottom_right - top_right)
            grad_coords = np.stack([grad_x * 0.5 * (width - 1), grad_y * 0.5 * (height - 1)], axis=-1)
        return grad_image, grad_coords

    return record_op("bilinear_sample", crops, (image, coords), backward)


def regular_thetas(n_rois: int, batch: int, dtype: type) -> np.ndarray:
    """
    Matrices cutting the image into `n_rois` vertical slices of equal width.
    """
    theta = np.zeros((batch, n_rois, 2, 3), dtype=dtype)
    theta[:, :, 0, 0] = 1.0 / n_rois
    theta[:, :, 0, 2] = -1.0 + (2 * np.arange(n_rois) + 1.0) / n_rois
    theta[:, :, 1, 1] = 1.0
    return theta


class Localizer(Module):
    KIND = LocalizerKind.LSTM

    def __init__(self, backbone_config: BackboneConfig, config: LocalizerConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        self.backbone = Backbone(backbone_config, rng)
        self.lstm = LSTMCell(backbone_config.out_channels, config.lstm_hidden, rng)
        self.head = Linear(config.lstm_hidden, THETA_SIZE, rng)

    def forward(self, image: Tensor, rng: np.random.Generator | None = None) -> RoiBatch:
        return localize(image, self, rng)


class RegularCropper(Module):
    """
    Cuts fixed, regularly spaced slices instead of predicting regions. Has no parameters and no penalty.
    """

    KIND = LocalizerKind.REGULAR

    def __init__(self, backbone_config: BackboneConfig, config: LocalizerConfig, rng: np.random.Generator) -> None:
        super().__init__()
        del backbone_config, rng
        self.config = config

    def forward(self, image: Tensor, rng: np.random.Generator | None = None) -> RoiBatch:
        del rng
        params = AffineParams(Tensor(regular_thetas(self.config.n_rois, image.shape[0], image.dtype)))
        grid = generate_grid(params, self.config.roi_size)
        return RoiBatch(bilinear_sample(image, grid), Tensor(0.0, dtype=image.dtype), params, grid)


class TransformerLocalizer(Module):
    KIND = LocalizerKind.TRANSFORMER

    def __init__(self, backbone_config: BackboneConfig, config: LocalizerConfig, rng: np.random.Generator) -> None:
        super().__init__()
        raise NotImplementedError("The transformer based localizer is not implemented, use the LSTM localizer")


def localize(image: Tensor, localizer: Localizer, rng: np.random.Generator | None = None) -> RoiBatch:
    """
    features -> pooled vector -> affine matrices -> sampling grids -> crops of the input image and penalty.
    """
    config = localizer.config
    features = global_pool(localizer.backbone(image))
    params = predict_affine(
        features,
        localizer.lstm,
        localizer.head,
        config.n_rois,
        config.rotation_dropout,
        localizer.training,
        rng,
    )
    grid = generate_grid(params, config.roi_size)
    return RoiBatch(bilinear_sample(image, grid), out_of_image_penalty(grid), params, grid)


def dump_rois(image: np.ndarray, rois: RoiBatch, directory: str | Path, prefix: str = "sample") -> list[Path]:
    """
    Write the input image, every crop of the first sample as PGM and a text file with the affine matrix and the four
    grid corners of every region.

    Parameters
    ----------
    image: np.ndarray
        The 8-bit input image, `(H, W)`
    rois: RoiBatch
        The localizer output of a batch whose first sample is `image`
    directory: str or Path
        The output directory, created if needed
    prefix: str
        The file name prefix

    Returns
    -------
    list of Path
        The files written
    """
    logger = logging.getLogger(__name__)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [directory / f"{prefix}_input.pgm"]
    write_pgm(written[0], image)

    n_rois = rois.crops.shape[0] if rois.grid is None else rois.grid.coords.shape[1]
    lines = []
    for index in range(n_rois):
        crop = np.clip(np.rint(rois.crops.data[index, 0] * 255), 0, 255).astype(np.uint8)
        path = directory / f"{prefix}_roi{index:02d}.pgm"
        write_pgm(path, crop)
        written.append(path)
        line = f"roi {index:02d}"
        if rois.params is not None:
            theta = rois.params.theta.data[0, index].reshape(-1)
            line += "\ttheta " + " ".join(f"{value:.6f}" for value in theta)
        if rois.grid is not None:
            coords = rois.grid.coords.data[0, index]
            corners = (coords[0, 0], coords[0, -1], coords[-1, -1], coords[-1, 0])
            line += "\tcorners " + " ".join(f"{u:.6f},{v:.6f}" for u, v in corners)
        lines.append(line)
    sidecar = directory / f"{prefix}_rois.txt"
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(sidecar)
    logger.info("Wrote %i region crops to '%s'", n_rois, directory)
    return written
