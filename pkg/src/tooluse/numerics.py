"""Dense numerical kernels shared by the autoencoder and the recurrent network.

Tensors are plain ``numpy.ndarray`` objects in float64.  Convolutions are
valid (unpadded) cross-correlations over ``C x H x W`` images; every function
also accepts a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when array shapes do not conform."""


class TrainingError(RuntimeError):
    """Raised when an optimisation produces non-finite values."""

    def __init__(self, message: str, iteration: int | None = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_parameter_errors: list = field(default_factory=list)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def affine_forward(x, W, b) -> np.ndarray:
    """Return ``W @ x + b``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DimensionError(
            f"affine shapes do not conform: x{x.shape}, W{W.shape}, b{b.shape}")
    return x @ W.T + b


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise DimensionError(f"expected {ndim}-d or batched input, got shape {x.shape}")


def _check_conv(x: np.ndarray, kernels: np.ndarray, stride: int) -> None:
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be K x C x kh x kw, got shape {kernels.shape}")
    _, c, h, w = x.shape
    _, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(
            f"kernel channels {kernels.shape} do not match input {x.shape[1:]}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kernels.shape} larger than input {x.shape[1:]}")


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # B x C x H' x W' x kh x kw view
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, kernels, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation of ``C x H x W`` input with ``K x C x kh x kw`` kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    xb, single = _batched(x, 3)
    _check_conv(xb, kernels, stride)
    kh, kw = kernels.shape[2:]
    win = _windows(xb, kh, kw, stride)
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3]))  # B x H' x W' x K
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if single else out


def conv2d_backward(x, kernels, upstream, stride: int = 1):
    """Gradients of a scalar loss w.r.t. input and kernels of :func:`conv2d_forward`.

    Returns ``(grad_input, grad_kernels)``.  For a batched input the kernel
    gradient is summed over the batch.
    """
    x, kernels, upstream = as_tensor(x), as_tensor(kernels), as_tensor(upstream)
    xb, single = _batched(x, 3)
    gb, _ = _batched(upstream, 3)
    _check_conv(xb, kernels, stride)
    k, c, kh, kw = kernels.shape
    ho = conv_output_size(xb.shape[2], kh, stride)
    wo = conv_output_size(xb.shape[3], kw, stride)
    if gb.shape != (xb.shape[0], k, ho, wo):
        raise DimensionError(
            f"upstream gradient shape {upstream.shape} does not match conv output "
            f"{(k, ho, wo)}")
    win = _windows(xb, kh, kw, stride)
    grad_kernels = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_input = _scatter_windows(gb, kernels, xb.shape, stride)
    return (grad_input[0] if single else grad_input), grad_kernels


def _scatter_windows(g: np.ndarray, kernels: np.ndarray, in_shape, stride: int) -> np.ndarray:
    _, _, ho, wo = g.shape
    kh, kw = kernels.shape[2:]
    out = np.zeros(in_shape)
    for i in range(kh):
        for j in range(kw):
            # B x K x H' x W' , K x C -> B x C x H' x W'
            contrib = np.tensordot(g, kernels[:, :, i, j], axes=([1], [0]))
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                contrib.transpose(0, 3, 1, 2)
    return out


def conv_transpose2d(z, kernels, stride: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`conv2d_forward`, mapping ``K x H' x W'`` back to ``C x H x W``."""
    z, kernels = as_tensor(z), as_tensor(kernels)
    zb, single = _batched(z, 3)
    h, w = out_hw
    k, c, kh, kw = kernels.shape
    if zb.shape[1] != k:
        raise DimensionError(f"input channels {zb.shape[1:]} do not match kernels {kernels.shape}")
    if (conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)) != zb.shape[2:]:
        raise DimensionError(
            f"output size {out_hw} inconsistent with input {zb.shape[1:]} and kernels "
            f"{kernels.shape} at stride {stride}")
    out = _scatter_windows(zb, kernels, (zb.shape[0], c, h, w), stride)
    return out[0] if single else out


def conv_transpose2d_backward(z, kernels, upstream, stride: int):
    """Returns ``(grad_z, grad_kernels)`` for :func:`conv_transpose2d`."""
    grad_z = conv2d_forward(upstream, kernels, stride)
    _, grad_kernels = conv2d_backward(upstream, kernels, z, stride)
    return grad_z, grad_kernels


def tanh_act(x) -> np.ndarray:
    return np.tanh(as_tensor(x))


def sigmoid_act(x) -> np.ndarray:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh_grad_from_output(y) -> np.ndarray:
    return 1.0 - y * y


def sigmoid_grad_from_output(y) -> np.ndarray:
    return y * (1.0 - y)


def sgd_step(params, grads, alpha: float, iteration: int | None = None) -> np.ndarray:
    """One plain gradient-descent update ``params - alpha * grads``."""
    params, grads = as_tensor(params), as_tensor(grads)
    if params.shape != grads.shape:
        raise DimensionError(f"params {params.shape} and grads {grads.shape} differ")
    if alpha < 0:
        raise ValueError(f"learning rate must be non-negative, got {alpha}")
    if not np.all(np.isfinite(grads)):
        raise TrainingError("non-finite gradient", iteration)
    return params - alpha * grads


def momentum_step(params, grads, velocity, alpha: float, momentum: float,
                  iteration: int | None = None):
    """Heavy-ball update; returns ``(params, velocity)``.  ``momentum=0`` is :func:`sgd_step`."""
    params, grads, velocity = as_tensor(params), as_tensor(grads), as_tensor(velocity)
    if not np.all(np.isfinite(grads)):
        raise TrainingError("non-finite gradient", iteration)
    velocity = momentum * velocity - alpha * grads
    return params + velocity, velocity


def relative_error(a, f) -> np.ndarray:
    a, f = as_tensor(a), as_tensor(f)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def finite_diff_check(loss_fn: Callable[[], float], params: Sequence[np.ndarray] | np.ndarray,
                      analytic_grads, epsilon: float = 1e-5,
                      masks: Sequence[np.ndarray | None] | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` takes no arguments and reads the arrays in ``params``, which
    are perturbed in place and restored afterwards.  ``masks`` optionally
    selects the entries to check in each array.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(params, np.ndarray):
        params, analytic_grads = [params], [analytic_grads]
        masks = None if masks is None else [masks]
    if masks is None:
        masks = [None] * len(params)
    per_param = []
    worst = 0.0
    for p, g, m in zip(params, analytic_grads, masks):
        g = as_tensor(g)
        numeric = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        sel = np.ones(flat.size, bool) if m is None else np.asarray(m, bool).reshape(-1)
        for idx in np.flatnonzero(sel):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            lp = loss_fn()
            flat[idx] = orig - epsilon
            lm = loss_fn()
            flat[idx] = orig
            numeric.reshape(-1)[idx] = (lp - lm) / (2 * epsilon)
        err = relative_error(g, numeric).reshape(-1)[sel]
        e = float(err.max()) if err.size else 0.0
        per_param.append(e)
        worst = max(worst, e)
    return GradCheckReport(worst, per_param)
