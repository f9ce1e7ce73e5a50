"""Training objectives, all differentiable torch scalars reduced by batch mean.

Clouds may be passed as ``(N, 3)`` or batched ``(B, N, 3)`` tensors; codes as
``(d,)`` or ``(B, d)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .errors import InvalidArgument, NumericError


def _batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x.unsqueeze(0)
    if x.dim() != 3 or x.shape[-1] != 3:
        raise InvalidArgument(f"expected (N, 3) or (B, N, 3) cloud, got {tuple(x.shape)}")
    if x.shape[1] == 0:
        raise InvalidArgument("empty point cloud")
    return x


@torch.no_grad()
def _sq_dist_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(B, N, M) squared distances as one bmm over augmented coordinates.

    Only used to choose indices; loss values are recomputed from exact point
    differences so gradients flow through the chosen pairs alone.
    """
    aa = (a * a).sum(-1, keepdim=True)
    bb = (b * b).sum(-1, keepdim=True)
    left = torch.cat([a, aa, torch.ones_like(aa)], dim=-1)
    right = torch.cat([-2.0 * b, torch.ones_like(bb), bb], dim=-1)
    return torch.bmm(left, right.transpose(1, 2)).clamp_min_(0.0)


def _pair_sq(a: torch.Tensor, b: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Squared distance from every point of ``a`` to ``b[idx]``."""
    nearest = torch.gather(b, 1, idx.unsqueeze(-1).expand(-1, -1, b.shape[-1]))
    return ((a - nearest) ** 2).sum(-1)


def _chamfer_from_matrix(a, b, d2: torch.Tensor, b_mask: torch.Tensor | None = None) -> torch.Tensor:
    to_a = _pair_sq(b, a, d2.min(1).indices)  # each b point to its nearest a point
    if b_mask is None:
        return (_pair_sq(a, b, d2.min(2).indices).mean(1) + to_a.mean(1)).mean()
    fwd = _pair_sq(a, b, d2.masked_fill(~b_mask.unsqueeze(1), math.inf).min(2).indices).mean(1)
    m = b_mask.to(to_a.dtype)
    return (fwd + (to_a * m).sum(1) / m.sum(1)).mean()


def chamfer_loss(a: torch.Tensor, b: torch.Tensor, b_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Symmetric mean-of-squared-nearest-distance Chamfer loss, batch mean.

    ``b_mask`` (B, M) restricts ``b`` to a per-sample subset without changing
    tensor shapes; masked-out points take part in neither direction.
    """
    a, b = _batched(a), _batched(b)
    if b_mask is not None:
        if b_mask.shape != b.shape[:2]:
            raise InvalidArgument("mask shape does not match cloud")
        if not bool(b_mask.any(dim=1).all()):
            raise InvalidArgument("mask selects no points for some sample")
    return _chamfer_from_matrix(a, b, _sq_dist_matrix(a, b), b_mask)


@torch.no_grad()
def _topk_mask(d2: torch.Tensor, k: int) -> torch.Tensor:
    """Mask over the last axis of the k smallest entries of each row, lower index on ties."""
    b, n, m = d2.shape
    if k < m:
        vals, idx = d2.topk(k + 1, dim=2, largest=False, sorted=True)
        top = idx[:, :, :k]
        # topk does not order equal values by index; redo tied rows with a stable sort
        tied = (vals[:, :, k - 1] == vals[:, :, k]) | (vals[:, :, :k] == vals[:, :, k:]).any(-1)
        if bool(tied.any()):
            top = top.clone()
            top[tied] = torch.sort(d2[tied], dim=1, stable=True).indices[:, :k]
    else:
        top = torch.arange(m, device=d2.device).expand(b, n, m)
    mask = torch.zeros((b, m), dtype=torch.bool, device=d2.device)
    mask.scatter_(1, top.reshape(b, -1), True)
    return mask


def degrade_mask(predicted: torch.Tensor, partial: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean (B, M) mask of predicted points among some partial point's k nearest."""
    predicted, partial = _batched(predicted), _batched(partial)
    if k < 1 or k > predicted.shape[1]:
        raise InvalidArgument(f"k={k} out of range for {predicted.shape[1]} predicted points")
    return _topk_mask(_sq_dist_matrix(partial, predicted), k)


def reconstruction_loss(P, P_hat, C_hat, k_degrade: int) -> torch.Tensor:
    """CD(P, P_hat) + CD(P, Deg(C_hat)); the degradation keeps, per point of P,
    its ``k_degrade`` nearest points of ``C_hat``."""
    P, P_hat, C_hat = _batched(P), _batched(P_hat), _batched(C_hat)
    if k_degrade < 1 or k_degrade > C_hat.shape[1]:
        raise InvalidArgument(f"k={k_degrade} out of range for {C_hat.shape[1]} predicted points")
    d2 = _sq_dist_matrix(P, C_hat)
    mask = _topk_mask(d2, k_degrade)
    return chamfer_loss(P, P_hat) + _chamfer_from_matrix(P, C_hat, d2, mask)


def smooth_l1(z_a: torch.Tensor, z_b: torch.Tensor) -> torch.Tensor:
    """Huber-style penalty with the transition at 1, mean over dims and batch."""
    if z_a.shape != z_b.shape:
        raise InvalidArgument(f"code shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    x = (z_a - z_b).abs()
    return torch.where(x < 1.0, 0.5 * x * x, x - 0.5).mean()


def code_equality_loss(z, z_mid, z_small) -> torch.Tensor:
    return smooth_l1(z, z_mid) + smooth_l1(z, z_small)


def _stack_negatives(anchor, negatives):
    if isinstance(negatives, (list, tuple)):
        if len(negatives) == 0:
            raise InvalidArgument("npair_loss needs at least one negative")
        negatives = torch.stack(list(negatives), dim=-2)
    if negatives.dim() == anchor.dim():
        negatives = negatives.unsqueeze(-2)
    if negatives.shape[-2] == 0:
        raise InvalidArgument("npair_loss needs at least one negative")
    return negatives


def npair_loss(anchor: torch.Tensor, positive: torch.Tensor, negatives) -> torch.Tensor:
    """log(1 + sum_j exp(a.n_j - a.p)), evaluated without overflow; batch mean.

    ``negatives`` is a list of vectors shaped like ``anchor`` or a tensor with
    the negatives along dim -2.
    """
    if anchor.shape != positive.shape:
        raise InvalidArgument("anchor and positive differ in shape")
    negatives = _stack_negatives(anchor, negatives)
    if negatives.shape[-1] != anchor.shape[-1]:
        raise InvalidArgument("negatives differ in dimensionality")
    ap = (anchor * positive).sum(-1, keepdim=True)
    s = (anchor.unsqueeze(-2) * negatives).sum(-1) - ap
    top = s.max(dim=-1).values
    m = top.clamp_min(0.0)
    shifted = m + torch.log(torch.exp(-m) + torch.exp(s - m.unsqueeze(-1)).sum(-1))
    # log1p keeps the result strictly positive when every exponent is very negative
    small = torch.log1p(torch.exp(s.clamp_max(0.0)).sum(-1))
    return torch.where(top > 0, shifted, small).mean()


def _ranking_sets(o, o_mid, o_small):
    if not (o.shape == o_mid.shape == o_small.shape):
        raise InvalidArgument("occlusion codes differ in shape")
    ones = torch.ones_like(o)
    return [
        (ones, o, [o_mid, o_small]),
        (o, o_mid, [o_small]),
        (o_small, o_mid, [o]),
    ]


def ranking_loss(o, o_mid, o_small) -> torch.Tensor:
    """N-pair terms over the three anchor sets of an occlusion series."""
    return sum(npair_loss(a, p, n) for a, p, n in _ranking_sets(o, o_mid, o_small))


def triplet_rank_loss(o, o_mid, o_small, delta: float) -> torch.Tensor:
    """Squared-Euclidean triplet hinge over the same anchor sets (ablation only)."""
    if not delta > 0:
        raise InvalidArgument(f"delta must be positive, got {delta}")
    total = 0.0
    for a, p, negs in _ranking_sets(o, o_mid, o_small):
        dp = ((a - p) ** 2).sum(-1)
        hinge = torch.stack([torch.relu(dp - ((a - n) ** 2).sum(-1) + delta) for n in negs]).mean(0)
        total = total + hinge.mean()
    return total


def input_grad_norm(disc, x: torch.Tensor) -> torch.Tensor:
    """Per-sample L2 norm of d disc(x) / d x, kept in the graph for double backprop."""
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    out = disc(x)
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True)
    return grad.reshape(grad.shape[0], -1).norm(dim=1)


def gradient_penalty_norms(disc, fake: torch.Tensor, real: torch.Tensor | None = None,
                           mode: str = "fake", generator: torch.Generator | None = None) -> torch.Tensor:
    """Gradient norms at the fakes (``mode="fake"``) or at random real/fake interpolates."""
    fake = fake.detach()
    if mode == "fake":
        at = fake
    elif mode == "interpolate":
        if real is None or real.shape != fake.shape:
            raise InvalidArgument("interpolate mode needs real samples shaped like the fakes")
        eps_shape = (fake.shape[0],) + (1,) * (fake.dim() - 1)
        eps = torch.rand(eps_shape, generator=generator, dtype=fake.dtype, device=fake.device)
        at = eps * real.detach() + (1 - eps) * fake
    else:
        raise InvalidArgument(f"unknown gp mode {mode!r}")
    return input_grad_norm(disc, at)


def wgan_d_loss(d_fake, d_real, grad_norm_at_fake, lambda_gp: float):
    if lambda_gp < 0:
        raise InvalidArgument(f"lambda_gp must be non-negative, got {lambda_gp}")
    d_fake, d_real, g = (torch.as_tensor(v) for v in (d_fake, d_real, grad_norm_at_fake))
    return d_fake.mean() - d_real.mean() + lambda_gp * ((g - 1.0) ** 2).mean()


def wgan_g_loss(d_fake):
    return -torch.as_tensor(d_fake).mean()


@dataclass
class LossBreakdown:
    rec: float = 0.0
    swap: float = 0.0
    z_equal: float = 0.0
    npair: float = 0.0
    g_point: float = 0.0
    g_code: float = 0.0
    d_point: float = 0.0
    d_code: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    COMPONENTS = ("rec", "swap", "z_equal", "npair", "g_point", "g_code", "d_point", "d_code")

    def as_dict(self) -> dict:
        return asdict(self)


def _is_finite(v) -> bool:
    if isinstance(v, torch.Tensor):
        return bool(torch.isfinite(v).all())
    return math.isfinite(v)


def total_losses(parts, gamma: float, beta: float) -> LossBreakdown:
    """Fill in the generator and discriminator totals.

    total_g = gamma*rec + gamma*swap + beta*z_equal + npair + g_point + g_code
    total_d = d_point + d_code

    ``parts`` is a mapping or LossBreakdown; values may be floats or tensors.
    """
    if isinstance(parts, LossBreakdown):
        parts = {k: getattr(parts, k) for k in LossBreakdown.COMPONENTS}
    unknown = set(parts) - set(LossBreakdown.COMPONENTS)
    if unknown:
        raise InvalidArgument(f"unknown loss components {sorted(unknown)}")
    vals = {k: parts.get(k, 0.0) for k in LossBreakdown.COMPONENTS}
    for name, v in vals.items():
        if not _is_finite(v):
            raise NumericError(f"loss term {name!r} is not finite")
    total_g = (gamma * vals["rec"] + gamma * vals["swap"] + beta * vals["z_equal"]
               + vals["npair"] + vals["g_point"] + vals["g_code"])
    total_d = vals["d_point"] + vals["d_code"]
    return LossBreakdown(**vals, total_g=total_g, total_d=total_d)
