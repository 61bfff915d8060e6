"""Composite reconstruction objective: spatial MSE, FFT-filtered MSE terms,
and an optional frequency-domain L1.

Filters act on the centred (fftshifted) unitary 2-D spectrum. "Outer" zeroing
removes coefficients beyond a square ring at Chebyshev distance
(1-f) * half-extent from DC; "inner" zeroing removes the central square block
within f * half-extent. f=0 is the identity for both.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeMismatch


@dataclass
class LossWeights:
    """Term weights and filter fractions.

    Shipped default is the best ablation configuration: spatial weight 0.75
    plus a single filtered term at weight 0.25 with cutoff fraction 0.3.
    """

    lambda_s: float = 0.75
    lambda_h: float = 0.0
    lambda_l: float = 0.25
    lambda_f: float = 0.0
    h: float = 0.3
    l: float = 0.3

    def __post_init__(self):
        for name in ("lambda_s", "lambda_h", "lambda_l", "lambda_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("h", "l"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")


def fft2_centered(x: torch.Tensor) -> torch.Tensor:
    """Unitary 2-D DFT over the last two dims, DC shifted to (H//2, W//2)."""
    return torch.fft.fftshift(torch.fft.fft2(x, norm="ortho"), dim=(-2, -1))


def ifft2_centered(coeffs: torch.Tensor) -> torch.Tensor:
    return torch.fft.ifft2(torch.fft.ifftshift(coeffs, dim=(-2, -1)), norm="ortho")


def _chebyshev_ratio(h: int, w: int, device, dtype=torch.float64) -> torch.Tensor:
    """max(|di|/halfH, |dj|/halfW) per coefficient, distances taken from DC."""
    ci, cj = h // 2, w // 2
    di = (torch.arange(h, device=device, dtype=dtype) - ci).abs() / max(ci, 1)
    dj = (torch.arange(w, device=device, dtype=dtype) - cj).abs() / max(cj, 1)
    return torch.maximum(di[:, None], dj[None, :])


def zero_outer(coeffs: torch.Tensor, fraction: float) -> torch.Tensor:
    """Zero coefficients with Chebyshev distance from DC exceeding (1-fraction) * half-extent."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0,1], got {fraction}")
    if fraction == 0.0:
        return coeffs
    h, w = coeffs.shape[-2:]
    ratio = _chebyshev_ratio(h, w, coeffs.device)
    keep = ratio <= (1.0 - fraction)
    return coeffs * keep.to(coeffs.real.dtype)


def zero_inner(coeffs: torch.Tensor, fraction: float) -> torch.Tensor:
    """Zero coefficients strictly within Chebyshev radius fraction * half-extent of DC."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0,1], got {fraction}")
    if fraction == 0.0:
        return coeffs
    h, w = coeffs.shape[-2:]
    ratio = _chebyshev_ratio(h, w, coeffs.device)
    keep = ratio >= fraction
    return coeffs * keep.to(coeffs.real.dtype)


def filtered_image(x: torch.Tensor, mode: str, fraction: float) -> torch.Tensor:
    """FFT -> ring zeroing -> inverse FFT, real part. Applied per channel image."""
    coeffs = fft2_centered(x)
    if mode == "outer":
        coeffs = zero_outer(coeffs, fraction)
    elif mode == "inner":
        coeffs = zero_inner(coeffs, fraction)
    else:
        raise ValueError(f"mode must be 'inner' or 'outer', got {mode!r}")
    return ifft2_centered(coeffs).real


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.mean((a - b) ** 2)


def total_loss(y_hat: torch.Tensor, y: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of spatial MSE, filtered MSEs, and frequency-domain L1.

    The L1 term runs over the concatenated real and imaginary coefficient
    parts, so it is zero iff the spectra agree. Differentiable throughout;
    gradients come from autograd.
    """
    if y_hat.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    w = weights
    loss = y_hat.new_zeros(())
    if w.lambda_s > 0:
        loss = loss + w.lambda_s * _mse(y_hat, y)
    if w.lambda_h > 0:
        loss = loss + w.lambda_h * _mse(
            filtered_image(y_hat, "outer", w.h), filtered_image(y, "outer", w.h)
        )
    if w.lambda_l > 0:
        loss = loss + w.lambda_l * _mse(
            filtered_image(y_hat, "inner", w.l), filtered_image(y, "inner", w.l)
        )
    if w.lambda_f > 0:
        fh, fy = fft2_centered(y_hat), fft2_centered(y)
        diff = fh - fy
        loss = loss + w.lambda_f * 0.5 * (diff.real.abs().mean() + diff.imag.abs().mean())
    return loss
