"""Encoders, decoders, discriminators and code fusion.

Every network carries a ``role`` tag. The functional wrappers at the bottom
check the tag so a decoder can't silently be fed to an encoder slot.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument, NumericError

ROLES = (
    "partial_encoder",
    "complete_encoder",
    "complete_decoder",
    "partial_decoder",
    "ae_decoder",
    "point_discriminator",
    "code_discriminator",
)
FUSION_MODES = ("multiply", "concat", "add")
# keeps occlusion codes strictly inside (0, 1) even where float32 sigmoid rounds to 0 or 1
OCC_EPS = 1e-6


@dataclass
class EncoderConfig:
    variant: str = "pointwise_mlp"  # or "edge_graph"
    widths: tuple = (64, 128, 256)
    k_graph: int = 8
    d: int = 96

    def __post_init__(self):
        if self.variant not in ("pointwise_mlp", "edge_graph"):
            raise InvalidArgument(f"unknown encoder variant {self.variant!r}")
        if self.d <= 0 or not self.widths or min(self.widths) <= 0:
            raise InvalidArgument("encoder needs d > 0 and non-empty positive widths")
        if self.variant == "edge_graph" and (len(self.widths) < 3 or self.k_graph < 1):
            raise InvalidArgument("edge_graph needs at least three widths and k_graph >= 1")


class CodePair(NamedTuple):
    z: torch.Tensor
    o: torch.Tensor


@dataclass
class ParameterSet:
    """Named float arrays of one network plus its role tag."""

    role: str
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES and not self.role.startswith("optim:"):
            raise InvalidArgument(f"unknown role {self.role!r}")


def parameter_set(module: nn.Module, role: str | None = None) -> ParameterSet:
    role = role or module.role
    arrays = {name: t.detach().cpu().numpy().copy() for name, t in module.state_dict().items()}
    return ParameterSet(role, arrays)


def load_parameter_set(module: nn.Module, ps: ParameterSet) -> nn.Module:
    if ps.role != module.role:
        raise InvalidArgument(f"parameter set role {ps.role!r} does not match network role {module.role!r}")
    ref = module.state_dict()
    state = {}
    for name, arr in ps.arrays.items():
        if name not in ref or tuple(ref[name].shape) != arr.shape:
            raise InvalidArgument(f"parameter {name!r} missing or mis-shaped for {module.role}")
        state[name] = torch.as_tensor(arr, dtype=ref[name].dtype)
    module.load_state_dict(state)
    return module


def init_uniform_(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialize Linear layers with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from a private generator."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, nn.Linear):
                bound = 1.0 / np.sqrt(layer.in_features)
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen) * 2 * bound - bound)
                if layer.bias is not None:
                    layer.bias.copy_(torch.rand(layer.bias.shape, generator=gen) * 2 * bound - bound)
    return module


def _mlp(widths, act_factory, last_act=True):
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(a, b))
        if last_act or i < len(widths) - 2:
            layers.append(act_factory())
    return nn.Sequential(*layers)


@torch.no_grad()
def _feature_knn(f: torch.Tensor, k: int) -> torch.Tensor:
    sq = (f * f).sum(-1, keepdim=True)
    d2 = sq + sq.transpose(1, 2) - 2.0 * torch.bmm(f, f.transpose(1, 2))
    k = min(k, f.shape[1])
    return d2.topk(k, dim=2, largest=False).indices


class EdgeConv(nn.Module):
    """Edge features [x_i, x_j - x_i] over a k-NN graph, max-aggregated per point."""

    def __init__(self, c_in, c_out, k):
        super().__init__()
        self.k = k
        self.mlp = nn.Sequential(nn.Linear(2 * c_in, c_out), nn.LeakyReLU(0.2))

    def forward(self, f):
        idx = _feature_knn(f, self.k)  # (B, N, k)
        b, n, k = idx.shape
        nbr = torch.gather(f.unsqueeze(1).expand(b, n, n, f.shape[-1]), 2,
                           idx.unsqueeze(-1).expand(b, n, k, f.shape[-1]))
        center = f.unsqueeze(2).expand_as(nbr)
        return self.mlp(torch.cat([center, nbr - center], dim=-1)).max(dim=2).values


class PointTrunk(nn.Module):
    """Per-point features followed by a symmetric max pool: (B, N, 3) -> (B, C)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.variant = cfg.variant
        w = list(cfg.widths)
        if cfg.variant == "pointwise_mlp":
            self.point_mlp = _mlp([3] + w, nn.ReLU)
        else:
            self.edge1 = EdgeConv(3, w[0], cfg.k_graph)
            self.edge2 = EdgeConv(w[0], w[1], cfg.k_graph)
            self.point_mlp = _mlp([w[0] + w[1]] + w[2:], nn.ReLU)
        self.out_dim = w[-1]

    def forward(self, pts):
        if pts.dim() == 2:
            pts = pts.unsqueeze(0)
        if self.variant == "pointwise_mlp":
            feats = self.point_mlp(pts)
        else:
            f1 = self.edge1(pts)
            f2 = self.edge2(f1)
            feats = self.point_mlp(torch.cat([f1, f2], dim=-1))
        return feats.max(dim=1).values


class PartialEncoder(nn.Module):
    role = "partial_encoder"

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.trunk = PointTrunk(cfg)
        self.z_head = nn.Linear(self.trunk.out_dim, cfg.d)
        self.o_head = nn.Linear(self.trunk.out_dim, cfg.d)

    def forward(self, pts) -> CodePair:
        g = self.trunk(pts)
        o = OCC_EPS + (1.0 - 2.0 * OCC_EPS) * torch.sigmoid(self.o_head(g))
        return CodePair(self.z_head(g), o)


class CompleteEncoder(nn.Module):
    role = "complete_encoder"

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.trunk = PointTrunk(cfg)
        self.z_head = nn.Linear(self.trunk.out_dim, cfg.d)

    def forward(self, pts):
        return self.z_head(self.trunk(pts))


class PointDecoder(nn.Module):
    """Fully connected code -> (B, n_out, 3) decoder; shared by every decoder role."""

    def __init__(self, d_in: int, n_out: int, hidden=(256, 512), role: str = "complete_decoder"):
        super().__init__()
        if role not in ("complete_decoder", "partial_decoder", "ae_decoder"):
            raise InvalidArgument(f"{role!r} is not a decoder role")
        self.role = role
        self.d_in = d_in
        self.n_out = n_out
        self.net = _mlp([d_in, *hidden, 3 * n_out], nn.ReLU, last_act=False)

    def forward(self, code):
        if code.dim() == 1:
            code = code.unsqueeze(0)
        return self.net(code).reshape(code.shape[0], self.n_out, 3)


class PointDiscriminator(nn.Module):
    """Pointwise MLP, max pool, scalar head. ``linear=True`` gives D(X) = w . mean(X) + b."""

    role = "point_discriminator"

    def __init__(self, widths=(64, 128, 256), head=(128,), linear: bool = False):
        super().__init__()
        self.linear = linear
        if linear:
            self.w = nn.Linear(3, 1)
        else:
            act = lambda: nn.LeakyReLU(0.2)  # noqa: E731
            self.point_mlp = _mlp([3, *widths], act)
            self.head = _mlp([widths[-1], *head, 1], act, last_act=False)

    def forward(self, pts):
        if pts.dim() == 2:
            pts = pts.unsqueeze(0)
        if self.linear:
            return self.w(pts.mean(dim=1)).squeeze(-1)
        return self.head(self.point_mlp(pts).max(dim=1).values).squeeze(-1)


class CodeDiscriminator(nn.Module):
    role = "code_discriminator"

    def __init__(self, d: int = 96, hidden=(128, 128)):
        super().__init__()
        self.net = _mlp([d, *hidden, 1], lambda: nn.LeakyReLU(0.2), last_act=False)

    def forward(self, z):
        if z.dim() == 1:
            z = z.unsqueeze(0)
        return self.net(z).squeeze(-1)


def fused_width(d: int, mode: str) -> int:
    if mode not in FUSION_MODES:
        raise InvalidArgument(f"unknown fusion mode {mode!r}")
    return 2 * d if mode == "concat" else d


def fuse(z: torch.Tensor, o: torch.Tensor, mode: str = "multiply") -> torch.Tensor:
    """Combine shape and occlusion codes: z*o (default), z+o, or [z; o]."""
    if mode == "concat":
        return torch.cat([z, o], dim=-1)
    if mode not in FUSION_MODES:
        raise InvalidArgument(f"unknown fusion mode {mode!r}")
    if z.shape != o.shape:
        raise InvalidArgument(f"code shapes differ: {tuple(z.shape)} vs {tuple(o.shape)}")
    return z * o if mode == "multiply" else z + o


def _check_role(net, role):
    if getattr(net, "role", None) != role:
        raise InvalidArgument(f"expected a {role} network, got {getattr(net, 'role', type(net).__name__)}")


def _check_finite(name, *tensors):
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise NumericError(f"{name} produced non-finite activations")


def encode_partial(net: PartialEncoder, P) -> CodePair:
    _check_role(net, "partial_encoder")
    pair = net(P)
    _check_finite("partial encoder", pair.z, pair.o)
    return pair


def encode_complete(net: CompleteEncoder, Y):
    _check_role(net, "complete_encoder")
    return net(Y)


def decode_complete(net: PointDecoder, z):
    _check_role(net, "complete_decoder")
    return net(z)


def decode_partial(net: PointDecoder, fused):
    _check_role(net, "partial_decoder")
    if fused.shape[-1] != net.d_in:
        raise InvalidArgument(f"fused code has width {fused.shape[-1]}, decoder expects {net.d_in}")
    return net(fused)


def discriminate_point(net: PointDiscriminator, cloud):
    _check_role(net, "point_discriminator")
    return net(cloud)


def discriminate_code(net: CodeDiscriminator, z):
    _check_role(net, "code_discriminator")
    return net(z)
