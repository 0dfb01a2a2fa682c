"""The four learned functions: mask extractor, per-region generators,
discriminator, and latent regressor.

All take channels-first tensors; a missing batch dimension is added and
stripped transparently. Every weight except the mask network's is spectrally
normalized; everything is orthogonally initialized (gain 0.8 by default)
from a seeded generator so construction is reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .composition import SceneConfig, complete_background_mask
from .primitives import (
    IN_EPS,
    ConditionalBatchNorm2d,
    PyramidPooling,
    ResBlock,
    SelfAttention,
    SpectralNorm,
    _StatefulMixin,
    apply_orthogonal_init,
    sn_conv,
    sn_linear,
)

INIT_GAIN = 0.8
CHANNEL_MULT_CAP = 16


@dataclass(frozen=True)
class NetworkConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    ch_f: int = 64
    ch_g: int = 64
    ch_d: int = 64

    def __post_init__(self):
        s = self.image_size
        if s < 32 or (s & (s - 1)) != 0:
            raise ValueError(f"image size must be a power of 2 >= 32, got {s}")
        if self.scene.width != self.scene.height:
            raise ValueError("networks assume square images")
        if min(self.ch_f, self.ch_g, self.ch_d) < 8:
            raise ValueError("channel counts must be >= 8")
        if self.ch_f % 4:
            raise ValueError(f"ch_f must be divisible by 4, got {self.ch_f}")

    @property
    def image_size(self) -> int:
        return self.scene.width

    @property
    def depth(self) -> int:
        """Down/up stages between full resolution and the 4x4 core."""
        return int(math.log2(self.image_size)) - 2

    def to_dict(self) -> dict:
        s = self.scene
        return {
            "n": s.n, "width": s.width, "height": s.height, "channels": s.channels,
            "latent_dim": s.latent_dim, "ch_f": self.ch_f, "ch_g": self.ch_g,
            "ch_d": self.ch_d,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        scene = SceneConfig(n=d["n"], width=d["width"], height=d["height"],
                            channels=d["channels"], latent_dim=d["latent_dim"])
        return cls(scene=scene, ch_f=d["ch_f"], ch_g=d["ch_g"], ch_d=d["ch_d"])


def _auto_batch(fn):
    """Allow (C,H,W) input for a forward expecting (B,C,H,W)."""
    def wrapped(self, x: Tensor, *args, **kwargs):
        if x.dim() == 3:
            return fn(self, x.unsqueeze(0), *args, **kwargs).squeeze(0)
        return fn(self, x, *args, **kwargs)
    return wrapped


class BatchNormPlain(nn.Module, _StatefulMixin):
    """Unconditional batch norm that honors the state-frozen flag."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            if not self.state_frozen:
                with torch.no_grad():
                    count = x.numel() // x.shape[1]
                    unbiased = var.detach() * count / max(count - 1, 1)
                    self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
                    self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased)
        else:
            mean, var = self.running_mean, self.running_var
        xhat = (x - mean.view(1, -1, 1, 1)) / torch.sqrt(var.view(1, -1, 1, 1) + self.eps)
        return self.weight.view(1, -1, 1, 1) * xhat + self.bias.view(1, -1, 1, 1)


# ---------------------------------------------------------------------------
# mask network
# ---------------------------------------------------------------------------

class MaskNetwork(nn.Module):
    """Fully convolutional soft-mask extractor.

    7x7 reflect-padded stem, two stride-2 convs, three instance-norm residual
    blocks, pyramid pooling, two upsample+conv stages, and a 7x7 head that
    ends in sigmoid (n == 2, complement appended) or per-pixel softmax. The
    output satisfies the mask simplex by construction. No spectral
    normalization here; this network is regularized by weight decay instead.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        n, c, ch = config.scene.n, config.scene.channels, config.ch_f
        self.n = n

        def in_relu(channels):
            return nn.Sequential(nn.InstanceNorm2d(channels, eps=IN_EPS, affine=True),
                                 nn.ReLU())

        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(c, ch // 4, 7), in_relu(ch // 4),
            nn.Conv2d(ch // 4, ch // 2, 3, stride=2, padding=1), in_relu(ch // 2),
            nn.Conv2d(ch // 2, ch, 3, stride=2, padding=1), in_relu(ch),
        )
        self.blocks = nn.Sequential(*[
            ResBlock(ch, ch, variant="plain", norm="instance", spectral=False)
            for _ in range(3)
        ])
        self.pyramid = PyramidPooling(ch)
        cp = self.pyramid.out_channels
        self.up1 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                 nn.Conv2d(cp, cp // 2, 3, padding=1), in_relu(cp // 2))
        self.up2 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                 nn.Conv2d(cp // 2, cp // 4, 3, padding=1), in_relu(cp // 4))
        out_ch = 1 if n == 2 else n
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(cp // 4, out_ch, 7))

    @_auto_batch
    def forward(self, image: Tensor) -> Tensor:
        s = self.config.image_size
        if image.shape[-3:] != (self.config.scene.channels, s, s):
            raise ValueError(
                f"expected input {self.config.scene.channels}x{s}x{s}, got "
                f"{tuple(image.shape[-3:])}"
            )
        h = self.stem(image)
        h = self.blocks(h)
        h = self.pyramid(h)
        h = self.up2(self.up1(h))
        logits = self.head(h)
        if self.n == 2:
            obj = torch.sigmoid(logits)
            return complete_background_mask(obj)
        return torch.softmax(logits, dim=-3)


# ---------------------------------------------------------------------------
# region generators
# ---------------------------------------------------------------------------

class RegionGenerator(nn.Module):
    """Generator for one region: paints an appearance from (mask, latent).

    The latent seeds a 4x4 map and drives conditional batch norm in every
    up-block; the mask enters as strided-conv features concatenated at each
    decoder resolution plus the raw mask at full resolution. The generator
    never sees the input image's pixels.
    """

    def __init__(self, config: NetworkConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        ch, d = config.ch_g, config.scene.latent_dim
        stages = config.depth
        m = max(4, ch // 4)
        self.mask_feat_channels = m
        self.seed_mult = min(2 ** stages, CHANNEL_MULT_CAP)
        self.seed = sn_linear(d, self.seed_mult * ch * 16, generator=generator)

        self.mask_encoder = nn.ModuleList()
        prev = 1
        for _ in range(stages):
            self.mask_encoder.append(sn_conv(prev, m, 3, stride=2, padding=1,
                                             generator=generator))
            prev = m

        self.blocks = nn.ModuleList()
        mults = [min(2 ** (stages - j), CHANNEL_MULT_CAP) for j in range(1, stages + 1)]
        in_mult = self.seed_mult
        attn_res = min(32, config.image_size // 2)
        self.attn_after = None
        res = 4
        for j, out_mult in enumerate(mults):
            self.blocks.append(ResBlock(in_mult * ch + m, out_mult * ch, variant="up",
                                        norm="cbn", latent_dim=d, generator=generator))
            res *= 2
            if res == attn_res:
                self.attn_after = j
            in_mult = out_mult
        self.attn = SelfAttention(mults[self.attn_after] * ch, generator=generator)
        self.out_norm = BatchNormPlain(ch)
        self.out_conv = sn_conv(ch + 1, config.scene.channels, 3, padding=1,
                                generator=generator)

    def forward(self, mask: Tensor, z: Tensor) -> Tensor:
        squeeze = mask.dim() == 3
        if squeeze:
            mask, z = mask.unsqueeze(0), z.unsqueeze(0)
        if mask.shape[-3] != 1:
            raise ValueError(f"expected a single-region mask, got {tuple(mask.shape)}")
        feats = []
        f = mask
        for conv in self.mask_encoder:
            f = F.relu(conv(f))
            feats.append(f)
        feats = feats[::-1]  # coarsest (4x4) first, matching decoder order

        h = self.seed(z).reshape(-1, self.seed_mult * self.config.ch_g, 4, 4)
        for j, block in enumerate(self.blocks):
            h = block(torch.cat([h, feats[j]], dim=1), z)
            if j == self.attn_after:
                h = self.attn(h)
        h = F.relu(self.out_norm(h))
        out = torch.tanh(self.out_conv(torch.cat([h, mask], dim=1)))
        return out.squeeze(0) if squeeze else out


class RegionGenerators(nn.Module):
    """One independent generator per region; index is 1-based, n = background."""

    def __init__(self, config: NetworkConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.members = nn.ModuleList(
            [RegionGenerator(config, generator=generator) for _ in range(config.scene.n)]
        )

    def forward(self, mask: Tensor, z: Tensor, region: int) -> Tensor:
        n = self.config.scene.n
        if not 1 <= region <= n:
            raise ValueError(f"region index {region} outside 1..{n}")
        return self.members[region - 1](mask, z)


# ---------------------------------------------------------------------------
# discriminator and latent regressor
# ---------------------------------------------------------------------------

class _DownTrunk(nn.Module):
    """Shared encoder shape: down-res blocks with attention after the first,
    a final plain block, ReLU, and spatial sum pooling."""

    def __init__(self, config: NetworkConfig, ch: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        stages = config.depth
        mults = [min(2 ** j, CHANNEL_MULT_CAP) for j in range(stages)]
        blocks = [ResBlock(config.scene.channels, ch * mults[0], variant="down",
                           norm="none", generator=generator)]
        self.attn = SelfAttention(ch * mults[0], generator=generator)
        for j in range(1, stages):
            blocks.append(ResBlock(ch * mults[j - 1], ch * mults[j], variant="down",
                                   norm="none", generator=generator))
        self.blocks = nn.ModuleList(blocks)
        self.top = ResBlock(ch * mults[-1], ch * mults[-1], variant="plain",
                            norm="none", generator=generator)
        self.out_features = ch * mults[-1]

    def forward(self, image: Tensor) -> Tensor:
        s = self.config.image_size
        if image.shape[-3:] != (self.config.scene.channels, s, s):
            raise ValueError(
                f"expected input {self.config.scene.channels}x{s}x{s}, got "
                f"{tuple(image.shape[-3:])}"
            )
        h = self.blocks[0](image)
        h = self.attn(h)
        for block in self.blocks[1:]:
            h = block(h)
        h = F.relu(self.top(h))
        return h.sum(dim=(2, 3))


class Discriminator(nn.Module):
    """Real-vs-redrawn critic; outputs one unbounded score per image."""

    def __init__(self, config: NetworkConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.trunk = _DownTrunk(config, config.ch_d, generator=generator)
        self.head = sn_linear(self.trunk.out_features, 1, generator=generator)

    @_auto_batch
    def forward(self, image: Tensor) -> Tensor:
        return self.head(self.trunk(image)).squeeze(-1)


class LatentRegressor(nn.Module):
    """Recovers the latent code injected into a redrawn region.

    The trunk is shared across regions; each region has its own linear head.
    """

    def __init__(self, config: NetworkConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.trunk = _DownTrunk(config, config.ch_d, generator=generator)
        self.heads = nn.ModuleList([
            sn_linear(self.trunk.out_features, config.scene.latent_dim,
                      generator=generator)
            for _ in range(config.scene.n)
        ])

    @_auto_batch
    def forward(self, image: Tensor, region: int) -> Tensor:
        n = self.config.scene.n
        if not 1 <= region <= n:
            raise ValueError(f"region index {region} outside 1..{n}")
        return self.heads[region - 1](self.trunk(image))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

@dataclass
class ModelSet:
    """All four networks of one model instance."""

    mask_net: MaskNetwork
    generators: RegionGenerators
    discriminator: Discriminator
    regressor: LatentRegressor
    config: NetworkConfig

    def named(self) -> dict[str, nn.Module]:
        return {"mask_net": self.mask_net, "generators": self.generators,
                "discriminator": self.discriminator, "regressor": self.regressor}

    def train(self):
        for m in self.named().values():
            m.train()

    def eval(self):
        for m in self.named().values():
            m.eval()


def build_models(config: NetworkConfig, seed: int, gain: float = INIT_GAIN) -> ModelSet:
    """Construct and orthogonally initialize all networks, reproducibly."""
    gen = torch.Generator().manual_seed(seed)
    models = ModelSet(
        mask_net=MaskNetwork(config),
        generators=RegionGenerators(config, generator=gen),
        discriminator=Discriminator(config, generator=gen),
        regressor=LatentRegressor(config, generator=gen),
        config=config,
    )
    for module in models.named().values():
        apply_orthogonal_init(module, gain, generator=gen)
    return models


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
