"""Sort-matching, EFDM and EFDMix kernels.

All kernels work on the last axis. A feature map ``(B, C, H, W)`` is treated as
``B * C`` independent value vectors of length ``H * W``. Ties are broken by
original index (stable sort), so results are reproducible.
"""
from __future__ import annotations

import logging

import numpy as np
import torch

logger = logging.getLogger(__name__)

DEFAULT_BETA_CONCENTRATION = 0.1


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def _check_pair(w: torch.Tensor, r: torch.Tensor) -> None:
    if w.shape != r.shape:
        raise ValueError(f"content and style must have the same shape, got {tuple(w.shape)} and {tuple(r.shape)}")
    if w.numel() == 0:
        raise ValueError("empty value vector")
    if torch.isnan(w).any() or torch.isnan(r).any():
        raise ValueError("NaN in sort-matching input")


def _rank_matched(w: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Place the sorted values of ``r`` at the rank positions of ``w`` (last axis)."""
    order_w = torch.sort(w.detach(), dim=-1, stable=True).indices
    sorted_r = torch.sort(r, dim=-1, stable=True).values
    return torch.empty_like(sorted_r).scatter(-1, order_w, sorted_r)


def sort_matching(w, r):
    """Exact histogram matching of ``w`` onto the values of ``r``.

    ``out[tau[i]] = r[kappa[i]]`` with ``tau = argsort(w)`` and
    ``kappa = argsort(r)``. Accepts numpy arrays or tensors and returns the
    same kind. Value-only: the result is detached.
    """
    wt, was_tensor = _as_tensor(w)
    rt, _ = _as_tensor(r)
    _check_pair(wt, rt)
    with torch.no_grad():
        out = _rank_matched(wt, rt)
    return out if was_tensor else out.numpy()


def efdmix(w, r, d):
    """Exact feature distribution mixing along the last axis.

    Value is ``d * w + (1 - d) * sort_matching(w, r)``. The subtracted content
    term is gradient-stopped, so ``d out / d w`` is the identity and
    ``d out / d r`` is ``(1 - d)`` on the rank-matched positions.

    ``d`` is a scalar or a tensor broadcastable against ``w``.
    """
    wt, was_tensor = _as_tensor(w)
    rt, _ = _as_tensor(r)
    _check_pair(wt, rt)
    d = torch.as_tensor(d, dtype=wt.dtype, device=wt.device)
    if ((d < 0) | (d > 1)).any():
        raise ValueError("mixing weight d must lie in [0, 1]")
    out = wt + (1.0 - d) * (_rank_matched(wt, rt) - wt.detach())
    return out if was_tensor else out.detach().numpy()


def sample_mixing_weights(n: int, c: float = DEFAULT_BETA_CONCENTRATION, *, device=None, dtype=torch.float32):
    """Draw ``n`` instance-specific weights ``d ~ Beta(c, c)``."""
    if c <= 0:
        raise ValueError(f"Beta concentration must be positive, got {c}")
    conc = torch.tensor(float(c), dtype=torch.float64)
    d = torch.distributions.Beta(conc, conc).sample((n,))
    return d.clamp(0.0, 1.0).to(device=device, dtype=dtype)


def batch_efdmix(h: torch.Tensor, c: float = DEFAULT_BETA_CONCENTRATION, *, perm=None, d=None):
    """EFDMix of a feature batch with a batch-shuffled copy of itself.

    Each sample ``i`` takes its style from ``h[perm[i]]``; mixing happens per
    channel over flattened spatial positions with one ``d`` per sample.
    ``perm`` and ``d`` are drawn when not given.
    """
    if h.dim() < 2:
        raise ValueError("expected a batched feature tensor")
    n = h.shape[0]
    if n < 2:
        logger.warning("batch_efdmix called with batch size 1; no style partner, returning input")
        return h
    if perm is None:
        perm = torch.randperm(n, device=h.device)
    if d is None:
        d = sample_mixing_weights(n, c, device=h.device, dtype=h.dtype)
    d = torch.as_tensor(d, dtype=h.dtype, device=h.device).reshape(n, *([1] * (h.dim() - 1)))
    flat = h.flatten(2) if h.dim() > 2 else h
    style = flat[perm]
    d_flat = d.reshape(n, *([1] * (flat.dim() - 1)))
    out = efdmix(flat, style, d_flat)
    return out.reshape(h.shape)
