"""Training objectives and the two controllers (equilibrium terms, identity centroids).

Every L1 distance is a mean over elements so loss weights do not depend on
image size.  Losses accept tensors (differentiable) or arrays and return 0-d
tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

MAGNET, AS_PRINTED = "magnet", "as_printed"


class BatchSizeError(ValueError):
    pass


class CentroidStateError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if hasattr(x, "pixels"):
        x = x.pixels
    return torch.as_tensor(np.asarray(x))


def _mean_abs(a, b) -> torch.Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(x, x_cyc) -> torch.Tensor:
    """Mean |G'(G(x)) - x|."""
    return _mean_abs(x_cyc, x)


def began_gen_loss(gen_out, disc_recon) -> torch.Tensor:
    """Reconstruction error of the discriminator on generated images."""
    return _mean_abs(gen_out, disc_recon)


def reconstruction_error(images, recon) -> torch.Tensor:
    return _mean_abs(images, recon)


def began_disc_loss(real_err, gen_loss, k: float) -> torch.Tensor:
    return _t(real_err) - k * _t(gen_loss)


def pair_disc_loss(s, inv_of_real, cyc, k_DP: float) -> torch.Tensor:
    """Pair-matching loss of the inverse generator: mean |s - G'(r)| - k * L_cyc."""
    return _mean_abs(s, inv_of_real) - k_DP * _t(cyc)


def identity_pixel_loss(x, gx) -> torch.Tensor:
    return _mean_abs(x, gx)


# ---------------------------------------------------------------------------
# equilibrium control


@dataclass
class EquilibriumState:
    k_DR: float = 0.0
    k_DS: float = 0.0
    k_DP: float = 0.0
    rate: float = 0.001
    gamma: float = 0.5


def update_k(k_prev: float, loss_D_real_term: float, loss_G: float,
             rate: float = 0.001, gamma: float = 0.5) -> float:
    """k + rate * (gamma * L_D - L_G), clamped to [0, 1]."""
    vals = (float(k_prev), float(loss_D_real_term), float(loss_G))
    if any(math.isnan(v) for v in vals):
        raise NumericError(f"NaN in equilibrium update: {vals}")
    k, ld, lg = vals
    return min(1.0, max(0.0, k + rate * (gamma * ld - lg)))


# ---------------------------------------------------------------------------
# identity centroids


@dataclass
class CentroidStore:
    dim: int
    beta: float = 0.95
    interpret_beta_as_retention: bool = False
    centroids: dict[int, torch.Tensor] = field(default_factory=dict)

    def get(self, label: int) -> torch.Tensor:
        c = self.centroids.get(int(label))
        return torch.zeros(self.dim) if c is None else c

    def initialized(self, label: int) -> bool:
        return int(label) in self.centroids

    def labels(self) -> list[int]:
        return sorted(self.centroids)

    def copy(self) -> "CentroidStore":
        return CentroidStore(self.dim, self.beta, self.interpret_beta_as_retention,
                             {k: v.clone() for k, v in self.centroids.items()})

    def equals(self, other: "CentroidStore") -> bool:
        return (self.dim == other.dim and self.labels() == other.labels()
                and all(torch.equal(self.centroids[k], other.centroids[k]) for k in self.centroids))


def update_centroids(store: CentroidStore, embeddings, labels) -> CentroidStore:
    """Move each sample's centroid towards it, one sample at a time in batch order.

    ``c <- c - beta * (c - f)``; with ``interpret_beta_as_retention`` the step
    size is ``1 - beta`` instead.
    """
    e = _t(embeddings).detach()
    if e.ndim != 2 or e.shape[1] != store.dim:
        raise ValueError(f"embeddings must be (M, {store.dim}), got {tuple(e.shape)}")
    step = 1.0 - store.beta if store.interpret_beta_as_retention else store.beta
    out = store.copy()
    for f, label in zip(e, np.asarray(labels).tolist()):
        c = out.get(label).to(f.dtype)
        out.centroids[int(label)] = c - step * (c - f)
    return out


def identity_set_loss(embeddings, labels, store: CentroidStore, eta: float = 1.0, *,
                      sign: str = MAGNET, sigma_floor: float = 1e-6,
                      stop_gradient: bool = True, sigma2: float | None = None,
                      return_sigma: bool = False):
    """Set-based identity loss over one batch, summed over samples.

    For sample i with squared distances ``d_j`` to every stored centroid,
    ``-log(exp(s*d_own/(2 var) - eta) / sum_{j != own} exp(s*d_j/(2 var)))``
    with ``s = -1`` (magnet) or ``+1`` (as printed) and
    ``var = max(sum_i d_own / (M - 1), sigma_floor)``; pass ``sigma2`` to hold
    the variance fixed instead.
    """
    e = _t(embeddings)
    labels = np.asarray(labels).tolist()
    m = e.shape[0]
    if m < 2:
        raise BatchSizeError("identity loss needs at least two samples per batch")
    stored = store.labels()
    if len(stored) < 2:
        raise CentroidStateError(f"identity loss needs >= 2 stored centroids, have {len(stored)}")
    if sign not in (MAGNET, AS_PRINTED):
        raise ValueError(f"unknown sign convention {sign!r}")
    s = -1.0 if sign == MAGNET else 1.0

    cents = torch.stack([store.centroids[j] for j in stored]).to(e.dtype)
    own = torch.stack([store.get(l) for l in labels]).to(e.dtype)
    d_own = ((e - own) ** 2).sum(dim=1)
    d_all = ((e[:, None, :] - cents[None]) ** 2).sum(dim=2)

    if sigma2 is not None:
        var = torch.as_tensor(float(sigma2), dtype=e.dtype)
    else:
        var = d_own.sum() / (m - 1)
        if stop_gradient:
            var = var.detach()
        var = torch.clamp(var, min=sigma_floor)

    col = {j: i for i, j in enumerate(stored)}
    mask = torch.ones_like(d_all, dtype=torch.bool)
    for i, l in enumerate(labels):
        if l in col:
            mask[i, col[l]] = False
    logits = (s * d_all / (2 * var)).masked_fill(~mask, float("-inf"))
    per_sample = -(s * d_own / (2 * var) - eta) + torch.logsumexp(logits, dim=1)
    loss = per_sample.sum()
    return (loss, var) if return_sigma else loss
