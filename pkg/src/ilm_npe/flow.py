"""Conditional rational-quadratic spline coupling flow.

The flow maps a standard Gaussian ``z`` to the (standardised) parameter
vector ``x`` through ``L`` coupling layers. In each layer the coordinates
flagged by an alternating mask pass through unchanged and, together with
the context vector, feed a small MLP that outputs the bin widths, heights
and interior knot derivatives of a monotone rational-quadratic spline on
``[-B, B]`` for every other coordinate. Outside ``[-B, B]`` the transform is
the identity, and the boundary derivatives are fixed at 1 so the map is
continuously differentiable everywhere.

The parameterisation is chosen so that an all-zero conditioner output
gives uniform bins with unit derivatives, i.e. the identity spline.
"""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .autodiff import DTYPE, ShapeError

__all__ = ["rq_spline", "spline_knots", "SplineCoupling", "SplineFlow"]

_LOG_2PI = math.log(2 * math.pi)


def spline_knots(uw, uh, ud, tail_bound: float, min_bin: float = 1e-3, min_deriv: float = 1e-3):
    """Turn raw conditioner outputs into knot positions and derivatives.

    ``uw`` and ``uh`` have ``K`` entries in the last axis, ``ud`` has
    ``K - 1``. Returns ``(cw, ch, d)`` with ``K + 1`` entries each: knot
    x-positions, knot y-positions (both spanning ``[-B, B]``) and knot
    derivatives (1 at both ends).
    """
    K = uw.shape[-1]
    if uh.shape[-1] != K or ud.shape[-1] != K - 1:
        raise ShapeError(f"spline parameters: widths {tuple(uw.shape)}, heights {tuple(uh.shape)}, "
                         f"derivatives {tuple(ud.shape)}")
    if min_bin * K >= 1:
        raise ValueError(f"min_bin {min_bin} too large for {K} bins")

    def knots(u):
        w = min_bin + (1 - min_bin * K) * torch.softmax(u, dim=-1)
        c = F.pad(torch.cumsum(w, dim=-1), (1, 0))
        c = 2 * tail_bound * c - tail_bound
        # pin the end knots exactly
        return torch.cat([torch.full_like(c[..., :1], -tail_bound), c[..., 1:-1],
                          torch.full_like(c[..., :1], tail_bound)], dim=-1)

    shift = math.log(math.expm1(1 - min_deriv))
    d_inner = min_deriv + F.softplus(ud + shift)
    ones = torch.ones_like(d_inner[..., :1])
    return knots(uw), knots(uh), torch.cat([ones, d_inner, ones], dim=-1)


def _bin_index(knots, v):
    idx = torch.sum(v[..., None] >= knots[..., :-1], dim=-1) - 1
    return idx.clamp(0, knots.shape[-1] - 2)


def rq_spline(x, uw, uh, ud, tail_bound: float, inverse: bool = False,
              min_bin: float = 1e-3, min_deriv: float = 1e-3):
    """Elementwise monotone rational-quadratic spline with identity tails.

    Parameters
    ----------
    x : tensor of shape (...)
        Inputs (outputs of the forward map when ``inverse=True``).
    uw, uh : tensors of shape (..., K)
        Unnormalised bin widths and heights.
    ud : tensor of shape (..., K - 1)
        Unnormalised interior knot derivatives.
    tail_bound : float
        Half-width ``B`` of the spline interval.

    Returns
    -------
    y, logabsdet : tensors of shape (...)
        Transformed values and ``log|dy/dx|`` of the map applied.
    """
    cw, ch, d = spline_knots(uw, uh, ud, tail_bound, min_bin, min_deriv)
    inside = (x > -tail_bound) & (x < tail_bound)
    xc = torch.where(inside, x, torch.zeros_like(x))
    k = _bin_index(ch if inverse else cw, xc)[..., None]

    x_k = cw.gather(-1, k)[..., 0]
    w_k = cw.gather(-1, k + 1)[..., 0] - x_k
    y_k = ch.gather(-1, k)[..., 0]
    h_k = ch.gather(-1, k + 1)[..., 0] - y_k
    d_k = d.gather(-1, k)[..., 0]
    d_k1 = d.gather(-1, k + 1)[..., 0]
    s = h_k / w_k
    slope_sum = d_k1 + d_k - 2 * s

    if inverse:
        dy = xc - y_k
        a = h_k * (s - d_k) + dy * slope_sum
        b = h_k * d_k - dy * slope_sum
        c = -s * dy
        disc = (b * b - 4 * a * c).clamp_min(0.0)
        xi = (2 * c) / (-b - torch.sqrt(disc))
        out = xi * w_k + x_k
    else:
        xi = (xc - x_k) / w_k
        num = h_k * (s * xi * xi + d_k * xi * (1 - xi))
        out = y_k + num / (s + slope_sum * xi * (1 - xi))

    om = xi * (1 - xi)
    den = s + slope_sum * om
    dnum = s * s * (d_k1 * xi * xi + 2 * s * om + d_k * (1 - xi) ** 2)
    logdet = torch.log(dnum) - 2 * torch.log(den)
    if inverse:
        logdet = -logdet
    y = torch.where(inside, out, x)
    return y, torch.where(inside, logdet, torch.zeros_like(logdet))


class SplineCoupling(nn.Module):
    """One coupling layer: ``identity`` coordinates condition the others."""

    def __init__(self, mask, context_dim: int, bins: int = 8, tail_bound: float = 5.0, hidden: int = 64):
        super().__init__()
        mask = torch.as_tensor(mask, dtype=torch.bool)
        self.register_buffer("id_idx", torch.nonzero(mask).flatten(), persistent=False)
        self.register_buffer("tr_idx", torch.nonzero(~mask).flatten(), persistent=False)
        self.bins = bins
        self.tail_bound = tail_bound
        n_in = len(self.id_idx) + context_dim
        n_out = len(self.tr_idx) * (3 * bins - 1)
        self.net = nn.Sequential(
            nn.Linear(n_in, hidden, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hidden, n_out, dtype=DTYPE),
        )
        with torch.no_grad():
            self.net[-1].weight.mul_(0.01)
            self.net[-1].bias.zero_()

    def _params(self, x, context):
        inp = torch.cat([x[:, self.id_idx], context], dim=1)
        p = self.net(inp).reshape(x.shape[0], len(self.tr_idx), 3 * self.bins - 1)
        K = self.bins
        return p[..., :K], p[..., K:2 * K], p[..., 2 * K:]

    def forward(self, x, context, inverse: bool = False):
        uw, uh, ud = self._params(x, context)
        y_tr, logdet = rq_spline(x[:, self.tr_idx], uw, uh, ud, self.tail_bound, inverse=inverse)
        y = x.clone()
        y[:, self.tr_idx] = y_tr
        return y, logdet.sum(dim=1)


class SplineFlow(nn.Module):
    """Conditional density ``q(x | h)`` on ``R^dim`` with a standard Gaussian base.

    Parameters
    ----------
    dim : int
        Parameter dimension.
    context_dim : int
        Length of the conditioning vector ``h``.
    layers, bins, tail_bound, hidden :
        Number of coupling layers, spline bins, spline half-width and
        conditioner width.
    """

    def __init__(self, dim: int, context_dim: int, layers: int = 5, bins: int = 8,
                 tail_bound: float = 5.0, hidden: int = 64):
        super().__init__()
        if dim < 1 or context_dim < 0 or layers < 1 or bins < 2:
            raise ValueError("need dim >= 1, context_dim >= 0, layers >= 1, bins >= 2")
        self.dim = dim
        self.context_dim = context_dim
        masks = []
        for layer in range(layers):
            if dim == 1:
                masks.append([False])
            else:
                masks.append([(i + layer) % 2 == 0 for i in range(dim)])
        self.couplings = nn.ModuleList(
            SplineCoupling(m, context_dim, bins, tail_bound, hidden) for m in masks
        )

    def identity_init(self) -> "SplineFlow":
        """Zero every conditioner output layer so the flow is the identity map."""
        with torch.no_grad():
            for c in self.couplings:
                c.net[-1].weight.zero_()
                c.net[-1].bias.zero_()
        return self

    def _check(self, x, context):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"flow input: expected (n, {self.dim}), got {tuple(x.shape)}")
        if context.ndim == 1:
            context = context.expand(x.shape[0], -1)
        if context.shape != (x.shape[0], self.context_dim):
            raise ShapeError(f"flow context: expected ({x.shape[0]}, {self.context_dim}), got {tuple(context.shape)}")
        return context

    def forward(self, z, context):
        """``x = T(z | h)``; returns ``(x, log|det dT/dz|)``."""
        context = self._check(z, context)
        logdet = torch.zeros(z.shape[0], dtype=z.dtype)
        for c in self.couplings:
            z, ld = c(z, context)
            logdet = logdet + ld
        return z, logdet

    def inverse(self, x, context):
        """``z = T^-1(x | h)``; returns ``(z, log|det dT^-1/dx|)``."""
        context = self._check(x, context)
        logdet = torch.zeros(x.shape[0], dtype=x.dtype)
        for c in reversed(self.couplings):
            x, ld = c(x, context, inverse=True)
            logdet = logdet + ld
        return x, logdet

    @staticmethod
    def base_log_prob(z):
        return -0.5 * (z * z).sum(dim=1) - 0.5 * z.shape[1] * _LOG_2PI

    def log_prob(self, x, context):
        z, logdet = self.inverse(x, context)
        return self.base_log_prob(z) + logdet

    def sample(self, context, n: int, generator: torch.Generator | None = None):
        """``n`` draws from ``q(. | context)`` for a single context vector."""
        context = torch.as_tensor(context, dtype=DTYPE).reshape(1, -1).expand(n, -1)
        z = torch.randn(n, self.dim, dtype=DTYPE, generator=generator)
        x, _ = self.forward(z, context)
        return x
