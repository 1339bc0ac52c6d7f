"""
Fused operations with hand-written backward rules: convolution, normalization layers, softmax and the cross-entropy
loss. Fusing them keeps the computation record short and numerically stable.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeMismatchError, Tensor, record_op


def conv2d(
    image: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """
    2-D cross-correlation of an `(N, C, H, W)` input with an `(O, C, kH, kW)` kernel.

    Parameters
    ----------
    image: Tensor
        The input in NCHW layout
    weight: Tensor
        The kernel in OIHW layout
    bias: Tensor or None
        An optional bias of shape `(O,)`
    stride: int
        The step between two windows in both directions
    padding: int
        The number of zero rows and columns added on each side

    Returns
    -------
    Tensor
        A tensor of shape `(N, O, (H + 2*padding - kH)//stride + 1, (W + 2*padding - kW)//stride + 1)`
    """
    if image.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(f"conv2d: expected 4-D input and kernel, got {image.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} or padding {padding}")
    batch, channels, height, width = image.shape
    out_channels, in_channels, kernel_h, kernel_w = weight.shape
    if channels != in_channels:
        raise ShapeMismatchError(
            f"conv2d: input with {channels} channels does not match the kernel (shapes {image.shape} and "
            f"{weight.shape})"
        )
    out_h = (height + 2 * padding - kernel_h) // stride + 1
    out_w = (width + 2 * padding - kernel_w) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeMismatchError(
            f"conv2d: kernel of shape {weight.shape} does not fit the padded input of shape {image.shape}"
        )

    padded = image.data
    if padding:
        padded = np.pad(padded, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (N, C, out_h, out_w, kH, kW)
    windows = sliding_window_view(padded, (kernel_h, kernel_w), axis=(2, 3))[:, :, ::stride, ::stride]
    result = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        result = result + bias.data[None, :, None, None]
    result = np.ascontiguousarray(result)

    def backward(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_weight = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        grad_image = None
        if image.requires_grad:
            columns = np.tensordot(grad, weight.data, axes=([1], [0]))  # (N, out_h, out_w, C, kH, kW)
            grad_padded = np.zeros_like(padded)
            for i in range(kernel_h):
                for j in range(kernel_w):
                    grad_padded[
                        :, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride
                    ] += columns[..., i, j].transpose(0, 3, 1, 2)
            grad_image = grad_padded[:, :, padding : padding + height, padding : padding + width]
        if bias is None:
            return grad_image, grad_weight
        return grad_image, grad_weight, grad.sum(axis=(0, 2, 3))

    inputs = (image, weight) if bias is None else (image, weight, bias)
    return record_op("conv2d", result, inputs, backward)


def _normalize(values: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    centered = values - values.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    return centered * inv_std, inv_std


def _normalize_backward(grad_normalized: np.ndarray, normalized: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    return inv_std * (
        grad_normalized
        - grad_normalized.mean(axis=-1, keepdims=True)
        - normalized * (grad_normalized * normalized).mean(axis=-1, keepdims=True)
    )


def group_norm(image: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize each (sample, channel group) to zero mean and unit variance, then apply the per-channel affine
    transformation. Statistics never mix samples of a batch.
    """
    if image.ndim < 2:
        raise ShapeMismatchError(f"group_norm: expected an (N, C, ...) input, got {image.shape}")
    batch, channels = image.shape[:2]
    if groups < 1 or channels % groups:
        raise ShapeMismatchError(f"group_norm: {channels} channels cannot be split into {groups} groups")
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatchError(
            f"group_norm: gamma {gamma.shape} and beta {beta.shape} must have shape ({channels},)"
        )
    if eps <= 0:
        raise ValueError(f"group_norm: eps must be positive, got {eps}")
    affine_shape = (1, channels) + (1,) * (image.ndim - 2)
    normalized, inv_std = _normalize(image.data.reshape(batch, groups, -1), eps)
    normalized_image = normalized.reshape(image.shape)
    result = normalized_image * gamma.data.reshape(affine_shape) + beta.data.reshape(affine_shape)
    reduce_axes = (0,) + tuple(range(2, image.ndim))

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_normalized = (grad * gamma.data.reshape(affine_shape)).reshape(batch, groups, -1)
        grad_image = _normalize_backward(grad_normalized, normalized, inv_std).reshape(image.shape)
        return grad_image, (grad * normalized_image).sum(axis=reduce_axes), grad.sum(axis=reduce_axes)

    return record_op("group_norm", result, (image, gamma, beta), backward)


def layer_norm(values: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize over the last axis, then scale by `gamma` and shift by `beta`.
    """
    features = values.shape[-1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise ShapeMismatchError(f"layer_norm: gamma {gamma.shape} and beta {beta.shape} must have shape ({features},)")
    normalized, inv_std = _normalize(values.data, eps)
    result = normalized * gamma.data + beta.data
    reduce_axes = tuple(range(values.ndim - 1))

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_values = _normalize_backward(grad * gamma.data, normalized, inv_std)
        return grad_values, (grad * normalized).sum(axis=reduce_axes), grad.sum(axis=reduce_axes)

    return record_op("layer_norm", result, (values, gamma, beta), backward)


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """
    Softmax along `axis`. Positions where the boolean `mask` is False get a weight of exactly zero.
    """
    values = logits.data
    if mask is not None:
        values = np.where(mask, values, -np.inf)
    result = _softmax(values, axis)

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (result * (grad - (grad * result).sum(axis=axis, keepdims=True)),)

    return record_op("softmax", result, (logits,), backward)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    result = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad - np.exp(result) * grad.sum(axis=axis, keepdims=True),)

    return record_op("log_softmax", result, (logits,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """
    Mean negative log-likelihood of the target classes.

    Parameters
    ----------
    logits: Tensor
        Unnormalized scores of shape `(..., C)`
    targets: np.ndarray
        Integer class ids of shape `logits.shape[:-1]`
    mask: np.ndarray or None
        Optional boolean array of the same shape as `targets`. Only positions marked True contribute to the mean.

    Returns
    -------
    Tensor
        A scalar
    """
    targets = np.asarray(targets)
    classes = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatchError(
            f"softmax_cross_entropy: targets of shape {targets.shape} do not match logits of shape {logits.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise ValueError(f"softmax_cross_entropy: target ids must lie in [0, {classes})")
    weights = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    count = max(float(weights.sum()), 1.0)

    flat_logits = logits.data.reshape(-1, classes)
    flat_targets = targets.reshape(-1)
    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    nll = log_norm - shifted[np.arange(flat_targets.size), flat_targets]
    result = np.asarray((nll * weights.reshape(-1)).sum() / count, dtype=logits.dtype)

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        probabilities = np.exp(shifted - log_norm[:, None])
        probabilities[np.arange(flat_targets.size), flat_targets] -= 1
        scale = (weights.reshape(-1, 1) / count) * grad
        return ((probabilities * scale).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return record_op("softmax_cross_entropy", result, (logits,), backward)
