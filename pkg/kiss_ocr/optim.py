"""
The rectified Adam optimizer, gradient norm clipping and the per epoch learning rate schedule.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .layers import Parameter
from .tensor import NonFiniteError

# below this length of the approximated simple moving average the adaptive learning rate is not used
RECTIFICATION_THRESHOLD = 4.0


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def radam_step(parameters: dict[str, Parameter], state: OptimizerState, rectify: bool = True) -> None:
    """
    One RAdam update of all parameters that hold a gradient. The bias corrected first moment is always used, it
    is divided by the bias corrected second moment only once the variance of the adaptive rate is tractable.

    Parameters
    ----------
    parameters: dict of str and Parameter
        The parameters by name
    state: OptimizerState
        The moment buffers, updated in place
    rectify: bool
        Use the adaptive branch once it is tractable. If False, every step is a plain momentum step.

    Raises
    ------
    NonFiniteError
        If a gradient contains NaN or Inf. No parameter is changed in this case.
    """
    for name, parameter in parameters.items():
        if parameter.grad is not None and not np.all(np.isfinite(parameter.grad)):
            raise NonFiniteError(f"radam_step: the gradient of '{name}' is not finite")

    state.step += 1
    beta1, beta2 = state.betas
    step = state.step
    beta2_t = beta2**step
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    rho_t = rho_inf - 2.0 * step * beta2_t / (1.0 - beta2_t)
    adaptive = rectify and rho_t > RECTIFICATION_THRESHOLD
    step_size = state.lr / (1.0 - beta1**step)
    if adaptive:
        rectification = math.sqrt(
            (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
        step_size *= rectification

    for name, parameter in parameters.items():
        grad = parameter.grad
        if grad is None:
            continue
        exp_avg = state.exp_avg.setdefault(name, np.zeros_like(parameter.data))
        exp_avg_sq = state.exp_avg_sq.setdefault(name, np.zeros_like(parameter.data))
        exp_avg = beta1 * exp_avg + (1.0 - beta1) * grad
        exp_avg_sq = beta2 * exp_avg_sq + (1.0 - beta2) * grad * grad
        state.exp_avg[name] = exp_avg
        state.exp_avg_sq[name] = exp_avg_sq
        if adaptive:
            update = step_size * exp_avg / (np.sqrt(exp_avg_sq / (1.0 - beta2_t)) + state.eps)
        else:
            update = step_size * exp_avg
        parameter.assign(parameter.data - update)


class RAdam:
    def __init__(
        self,
        named_parameters: Iterable[tuple[str, Parameter]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        rectify: bool = True,
    ) -> None:
        if lr <= 0 or eps <= 0 or not all(0 <= beta < 1 for beta in betas):
            raise ValueError(f"Invalid optimizer settings: lr={lr}, betas={betas}, eps={eps}")
        self.__logger = logging.getLogger(__name__)
        self.__parameters = dict(named_parameters)
        self.__rectify = rectify
        self.state = OptimizerState(lr=lr, betas=betas, eps=eps)

    @property
    def parameters(self) -> dict[str, Parameter]:
        return self.__parameters

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        radam_step(self.__parameters, self.state, self.__rectify)
        self.__logger.debug("Optimizer step %(step)i at lr %(lr)g", {"step": self.state.step, "lr": self.state.lr})

    def zero_grad(self) -> None:
        for parameter in self.__parameters.values():
            parameter.grad = None


def clip_grad_norm(parameters: Sequence[Parameter], max_norm: float) -> float:
    """
    Scale the gradients so that their global L2 norm does not exceed `max_norm`. Gradients below the limit are left
    untouched.

    Returns
    -------
    float
        The norm before clipping
    """
    if max_norm <= 0:
        raise ValueError(f"clip_grad_norm: max_norm must be positive, got {max_norm}")
    grads = [parameter.grad for parameter in parameters if parameter.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(grad, dtype=np.float64))) for grad in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for parameter in parameters:
            if parameter.grad is not None:
                parameter.grad = parameter.grad * parameter.grad.dtype.type(scale)
    return norm


def learning_rate_for_epoch(base_lr: float, decay: float, epoch: int) -> float:
    return base_lr * decay**epoch


def parameter_hash(parameters: dict[str, Parameter] | Iterable[tuple[str, Parameter]]) -> str:
    """
    A SHA-256 over the names and raw values of the parameters.
    """
    items = parameters.items() if isinstance(parameters, dict) else parameters
    digest = hashlib.sha256()
    for name, parameter in items:
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(parameter.data).tobytes())
    return digest.hexdigest()
