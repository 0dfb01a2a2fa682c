"""Differentiable building blocks shared by all four networks.

Conventions:
  * weights of convolutions are treated as ``out_channels x (in*kh*kw)``
    matrices for spectral purposes;
  * spectral normalization runs one power-iteration step per training
    forward; the ``u`` vector persists between calls as a buffer;
  * modules holding mutable state (the spectral ``u``, batch-norm running
    statistics) honor a ``state_frozen`` flag so a network can run in
    training mode without touching its buffers. ``freeze_state`` /
    :func:`set_state_frozen` toggle it for a whole module tree.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
import torch.nn.functional as F
from torch import Tensor, nn

EPS_NORMALIZE = 1e-12
BN_EPS = 1e-5
IN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def orthogonal_init(shape, gain: float, generator: torch.Generator | None = None,
                    dtype: torch.dtype = torch.float32) -> Tensor:
    """Orthogonal weight tensor: rows of the flattened (rows, cols) view are
    orthonormal scaled by ``gain`` when rows <= cols (columns otherwise).

    Deterministic given the generator state.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2 or any(s <= 0 for s in shape):
        raise ValueError(f"shape must be >=2-D with positive sizes, got {shape}")
    if gain <= 0:
        raise ValueError(f"gain must be > 0, got {gain}")
    rows = shape[0]
    cols = math.prod(shape[1:])
    flat = torch.randn(max(rows, cols), min(rows, cols), generator=generator,
                       dtype=torch.float64)
    q, r = torch.linalg.qr(flat)
    # fix the sign ambiguity of QR so the distribution is uniform (Haar) and
    # the result is reproducible across LAPACK builds
    q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
    if rows < cols:
        q = q.t()
    return (gain * q).reshape(shape).to(dtype)


def apply_orthogonal_init(module: nn.Module, gain: float,
                          generator: torch.Generator | None = None) -> None:
    """Orthogonally initialize every conv/linear weight of a module tree.

    Biases are zeroed. Iteration order follows ``named_modules`` so a fixed
    generator state yields bit-identical weights.
    """
    for _, m in module.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)) and not getattr(m, "init_exempt", False):
            with torch.no_grad():
                m.weight.copy_(orthogonal_init(m.weight.shape, gain, generator))
                if m.bias is not None:
                    m.bias.zero_()


# ---------------------------------------------------------------------------
# frozen-state plumbing
# ---------------------------------------------------------------------------

class _StatefulMixin:
    """Mixin for modules whose forward mutates buffers in training mode."""

    state_frozen: bool = False


def set_state_frozen(module: nn.Module, frozen: bool) -> None:
    for m in module.modules():
        if isinstance(m, _StatefulMixin):
            m.state_frozen = frozen


@contextmanager
def frozen_state(*modules: nn.Module):
    """Run forwards without mutating spectral/batch-stat buffers."""
    for m in modules:
        set_state_frozen(m, True)
    try:
        yield
    finally:
        for m in modules:
            set_state_frozen(m, False)


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------

def power_iteration_step(weight2d: Tensor, u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """One power-iteration step; returns (sigma, new_u, v).

    A zero (or numerically zero) matrix yields sigma == 1 and leaves ``u``
    unchanged, so the caller divides by 1 and returns the weight as-is.
    """
    with torch.no_grad():
        wv = weight2d.t().mv(u)
        nv = wv.norm()
        if nv <= EPS_NORMALIZE:
            return weight2d.new_tensor(1.0), u, torch.zeros_like(wv)
        v = wv / nv
        wu = weight2d.mv(v)
        nu = wu.norm()
        if nu <= EPS_NORMALIZE:
            return weight2d.new_tensor(1.0), u, v
        new_u = wu / nu
    sigma = torch.dot(new_u, weight2d.mv(v))
    return sigma, new_u, v


class SpectralNorm(nn.Module, _StatefulMixin):
    """Wrap a conv/linear module, dividing its weight by the estimated
    largest singular value on every forward.

    In training mode (and unfrozen) the persistent ``u`` advances by one
    power-iteration step per call; otherwise sigma is estimated from the
    stored ``u`` without side effects.
    """

    def __init__(self, module: nn.Module, generator: torch.Generator | None = None):
        super().__init__()
        if not hasattr(module, "weight"):
            raise TypeError(f"{type(module).__name__} has no weight to normalize")
        self.module = module
        rows = module.weight.shape[0]
        u = torch.randn(rows, generator=generator)
        self.register_buffer("u", u / u.norm())

    def compute_weight(self) -> Tensor:
        w = self.module.weight
        w2d = w.reshape(w.shape[0], -1)
        sigma, new_u, _ = power_iteration_step(w2d, self.u.to(w.dtype))
        if self.training and not self.state_frozen:
            with torch.no_grad():
                self.u.copy_(new_u.to(self.u.dtype))
        return w / sigma

    def forward(self, x: Tensor) -> Tensor:
        w = self.compute_weight()
        m = self.module
        if isinstance(m, nn.Conv2d):
            return F.conv2d(x, w, m.bias, m.stride, m.padding, m.dilation, m.groups)
        if isinstance(m, nn.Linear):
            return F.linear(x, w, m.bias)
        raise TypeError(f"unsupported wrapped module {type(m).__name__}")


def estimate_spectral_norm(weight: Tensor, iterations: int,
                           generator: torch.Generator | None = None) -> Tensor:
    """Power-iteration estimate of the largest singular value of a 2-D view."""
    w2d = weight.reshape(weight.shape[0], -1)
    u = torch.randn(w2d.shape[0], generator=generator, dtype=w2d.dtype)
    u = u / u.norm()
    sigma = w2d.new_tensor(1.0)
    for _ in range(iterations):
        sigma, u, _ = power_iteration_step(w2d, u)
    return sigma.detach()


def sn_conv(in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
            bias: bool = True, generator: torch.Generator | None = None) -> SpectralNorm:
    return SpectralNorm(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding, bias=bias),
        generator=generator,
    )


def sn_linear(in_f: int, out_f: int, bias: bool = True,
              generator: torch.Generator | None = None) -> SpectralNorm:
    return SpectralNorm(nn.Linear(in_f, out_f, bias=bias), generator=generator)


# ---------------------------------------------------------------------------
# self-attention
# ---------------------------------------------------------------------------

class SelfAttention(nn.Module):
    """Non-local attention block, residual with a zero-initialized gate.

    Query/key channels are C/8, value channels C/2, with a 1x1 projection
    back to C. At init gamma == 0 so the block is the exact identity.
    """

    def __init__(self, channels: int, spectral: bool = True,
                 generator: torch.Generator | None = None):
        super().__init__()
        if channels < 8:
            raise ValueError(f"self-attention needs >= 8 channels, got {channels}")
        inner_qk = channels // 8
        inner_v = channels // 2

        def conv1x1(cin, cout):
            c = nn.Conv2d(cin, cout, 1, bias=False)
            return SpectralNorm(c, generator=generator) if spectral else c

        self.query = conv1x1(channels, inner_qk)
        self.key = conv1x1(channels, inner_qk)
        self.value = conv1x1(channels, inner_v)
        self.out = conv1x1(inner_v, channels)
        self.gamma = nn.Parameter(torch.zeros(1))

    def attention_weights(self, x: Tensor) -> Tensor:
        b, _, h, w = x.shape
        q = self.query(x).flatten(2)                      # B, C/8, HW
        k = self.key(x).flatten(2)
        logits = torch.bmm(q.transpose(1, 2), k)          # B, HW(query), HW(key)
        return F.softmax(logits, dim=2)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        attn = self.attention_weights(x)
        v = self.value(x).flatten(2)                      # B, C/2, HW
        mixed = torch.bmm(v, attn.transpose(1, 2)).reshape(b, -1, h, w)
        return x + self.gamma * self.out(mixed)


# ---------------------------------------------------------------------------
# conditional batch normalization
# ---------------------------------------------------------------------------

class ConditionalBatchNorm2d(nn.Module, _StatefulMixin):
    """Batch normalization whose scale/shift are affine functions of a latent
    code: ``y = gamma(z) * norm(x) + beta(z)`` with gamma(z) = 1 + W_g z.

    Training mode normalizes with batch statistics (batch >= 2) and updates
    running statistics unless state-frozen; eval mode uses running stats.
    """

    def __init__(self, channels: int, latent_dim: int):
        super().__init__()
        self.channels = channels
        # zero-initialized so the block starts as plain batch norm (the
        # conditioning gate opens as training moves the projections)
        self.gain = nn.Linear(latent_dim, channels, bias=False)
        self.shift = nn.Linear(latent_dim, channels, bias=False)
        nn.init.zeros_(self.gain.weight)
        nn.init.zeros_(self.shift.weight)
        self.gain.init_exempt = True
        self.shift.init_exempt = True
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: Tensor, z: Tensor) -> Tensor:
        if x.dim() != 4:
            raise ValueError(f"expected (B,C,H,W) input, got shape {tuple(x.shape)}")
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("conditional batch norm needs batch >= 2 in train mode")
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            if not self.state_frozen:
                with torch.no_grad():
                    m = BN_MOMENTUM
                    count = x.numel() // x.shape[1]
                    unbiased = var.detach() * count / max(count - 1, 1)
                    self.running_mean.mul_(1 - m).add_(m * mean.detach())
                    self.running_var.mul_(1 - m).add_(m * unbiased)
        else:
            mean = self.running_mean
            var = self.running_var
        xhat = (x - mean.view(1, -1, 1, 1)) / torch.sqrt(var.view(1, -1, 1, 1) + BN_EPS)
        gamma = 1 + self.gain(z)
        beta = self.shift(z)
        return gamma.view(-1, self.channels, 1, 1) * xhat + beta.view(-1, self.channels, 1, 1)


# ---------------------------------------------------------------------------
# pyramid pooling
# ---------------------------------------------------------------------------

class PyramidPooling(nn.Module):
    """Multi-scale context pooling: for each scale, average-pool the map into
    s x s bins (uneven bins allowed), project to one channel with a 1x1 conv
    and upsample back (nearest), concatenating onto the input. Output has
    ``in_channels + len(scales)`` channels.
    """

    DEFAULT_SCALES = (1, 2, 3, 6)

    def __init__(self, in_channels: int, scales=DEFAULT_SCALES):
        super().__init__()
        self.scales = tuple(int(s) for s in scales)
        if any(s < 1 for s in self.scales):
            raise ValueError(f"scales must be >= 1, got {self.scales}")
        self.projections = nn.ModuleList(
            [nn.Conv2d(in_channels, 1, 1, bias=False) for _ in self.scales]
        )
        self.out_channels = in_channels + len(self.scales)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if min(h, w) < max(self.scales):
            raise ValueError(
                f"feature map {h}x{w} smaller than pooling scale {max(self.scales)}"
            )
        branches = [x]
        for s, proj in zip(self.scales, self.projections):
            pooled = F.adaptive_avg_pool2d(x, s)
            branches.append(F.interpolate(proj(pooled), size=(h, w), mode="nearest"))
        return torch.cat(branches, dim=1)


# ---------------------------------------------------------------------------
# residual blocks
# ---------------------------------------------------------------------------

class ResBlock(nn.Module):
    """Residual block ``y = shortcut(x) + branch(x)``.

    variant: "plain" keeps resolution, "down" halves it (average pooling),
    "up" doubles it (nearest upsample before the convs).
    norm: "none", "instance", or "cbn" (conditional batch norm driven by a
    latent code passed alongside x). The shortcut is a 1x1 projection
    whenever channels or resolution change. Convolutions are spectrally
    normalized unless ``spectral=False`` (the mask network's blocks).
    """

    def __init__(self, in_ch: int, out_ch: int, variant: str = "plain",
                 norm: str = "none", latent_dim: int | None = None,
                 spectral: bool = True, generator: torch.Generator | None = None):
        super().__init__()
        if variant not in ("plain", "down", "up"):
            raise ValueError(f"unknown variant {variant!r}")
        if norm not in ("none", "instance", "cbn"):
            raise ValueError(f"unknown norm {norm!r}")
        if norm == "cbn" and not latent_dim:
            raise ValueError("cbn norm needs latent_dim")
        self.variant = variant
        self.norm = norm

        def conv(cin, cout):
            c = nn.Conv2d(cin, cout, 3, padding=1)
            return SpectralNorm(c, generator=generator) if spectral else c

        self.conv1 = conv(in_ch, out_ch)
        self.conv2 = conv(out_ch, out_ch)
        if norm == "instance":
            self.n1 = nn.InstanceNorm2d(in_ch, eps=IN_EPS, affine=True)
            self.n2 = nn.InstanceNorm2d(out_ch, eps=IN_EPS, affine=True)
        elif norm == "cbn":
            self.n1 = ConditionalBatchNorm2d(in_ch, latent_dim)
            self.n2 = ConditionalBatchNorm2d(out_ch, latent_dim)
        self.needs_projection = in_ch != out_ch or variant != "plain"
        if self.needs_projection:
            p = nn.Conv2d(in_ch, out_ch, 1)
            self.proj = SpectralNorm(p, generator=generator) if spectral else p

    def _normed(self, which: int, x: Tensor, z: Tensor | None) -> Tensor:
        if self.norm == "none":
            return x
        layer = self.n1 if which == 1 else self.n2
        return layer(x, z) if self.norm == "cbn" else layer(x)

    def _resize(self, x: Tensor) -> Tensor:
        if self.variant == "down":
            return F.avg_pool2d(x, 2)
        if self.variant == "up":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        return x

    def forward(self, x: Tensor, z: Tensor | None = None) -> Tensor:
        h = F.relu(self._normed(1, x, z))
        if self.variant == "up":
            h = self._resize(h)
        h = self.conv1(h)
        h = F.relu(self._normed(2, h, z))
        h = self.conv2(h)
        if self.variant == "down":
            h = self._resize(h)
        shortcut = x
        if self.variant == "up":
            shortcut = self._resize(shortcut)
        if self.needs_projection:
            shortcut = self.proj(shortcut)
        if self.variant == "down":
            shortcut = F.avg_pool2d(shortcut, 2)
        return shortcut + h
