"""Truncated ResNet-18 with a spatial transformer after each residual stage."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import torch
from torch import nn
from torchvision.models import resnet18

from .affine import AffineParams, apply_affine, check_mode, identity_params, params_to_theta

STAGE_CHANNELS = (64, 128, 256)
STAGE_STRIDES = (4, 8, 16)
RESNET18_FILE = "resnet18-f37072fd.pth"


class BackboneWeightsError(RuntimeError):
    """The requested pretrained weights could not be found."""


def weight_cache_dirs() -> List[Path]:
    dirs = []
    if os.environ.get("REGAD_CACHE"):
        dirs.append(Path(os.environ["REGAD_CACHE"]))
    dirs.append(Path(torch.hub.get_dir()) / "checkpoints")
    return dirs


def load_resnet18(weights: str = "imagenet", seed: int = 0) -> nn.Module:
    """Build ResNet-18 and load ``weights``.

    ``weights`` is ``"imagenet"`` (looked up in ``$REGAD_CACHE`` and the torch
    hub cache, never downloaded), ``"random"`` (seeded default init) or a path
    to a state-dict file.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = resnet18(weights=None)
    if weights == "random":
        return net
    if weights == "imagenet":
        candidates = [d / RESNET18_FILE for d in weight_cache_dirs()]
        path = next((p for p in candidates if p.is_file()), None)
        if path is None:
            raise BackboneWeightsError(
                "ImageNet ResNet-18 weights not found; looked for "
                + ", ".join(str(p) for p in candidates)
                + " (set REGAD_CACHE or use backbone='random')")
    else:
        path = Path(weights)
        if not path.is_file():
            raise BackboneWeightsError(f"backbone weight file not found: {path}")
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return net


class Localization(nn.Module):
    """Tiny STN regressor: two strided convs, pooled, then two linear layers.

    The last layer starts at zero weight with the identity as bias, so a fresh
    network predicts the identity transform.
    """

    def __init__(self, in_channels: int, mode: str, width: int = 32):
        super().__init__()
        check_mode(mode)
        self.mode = mode
        n_params = len(identity_params(mode))
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(3),
            nn.Flatten(),
            nn.Linear(width * 9, width),
            nn.ReLU(inplace=True),
        )
        self.regressor = nn.Linear(width, n_params)
        with torch.no_grad():
            self.regressor.weight.zero_()
            self.regressor.bias.copy_(identity_params(mode))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.regressor(self.features(x))


class SpatialTransformer(nn.Module):
    def __init__(self, in_channels: int, mode: str = "rotation_scale"):
        super().__init__()
        check_mode(mode)
        self.mode = mode
        self.loc = Localization(in_channels, mode) if mode != "none" else None

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """B x 2 x 3 theta for a batch of feature maps."""
        if self.loc is None:
            return torch.eye(2, 3, dtype=x.dtype, device=x.device).expand(x.shape[0], 2, 3)
        return params_to_theta(self.loc(x), self.mode)

    def forward(self, x: torch.Tensor):
        theta = self.predict(x)
        if self.loc is None:
            return x, theta
        return apply_affine(x, theta), theta


@dataclass
class FeatureSet:
    """Per-stage maps before (``pre``) and after (``post``) the STNs, plus thetas."""

    pre: List[torch.Tensor]
    post: List[torch.Tensor]
    thetas: List[torch.Tensor]

    def params(self, index: int, mode: str) -> List[AffineParams]:
        return [AffineParams(t[index].detach().cpu().double().numpy(), mode)
                for t in self.thetas]


class FeatureNet(nn.Module):
    """First three ResNet-18 stages, each followed by a spatial transformer.

    ``chain="pre"`` feeds each stage the previous stage's untransformed
    output; ``"post"`` feeds it the transformed one.
    """

    def __init__(self, mode: str = "rotation_scale", backbone: str = "imagenet",
                 chain: str = "pre", seed: int = 0):
        super().__init__()
        if chain not in ("pre", "post"):
            raise ValueError(f"chain must be 'pre' or 'post', got {chain!r}")
        net = load_resnet18(backbone, seed)
        self.mode = mode
        self.chain = chain
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3])
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.stns = nn.ModuleList(SpatialTransformer(c, mode) for c in STAGE_CHANNELS)

    def backbone_parameters(self):
        yield from self.stem.parameters()
        yield from self.stages.parameters()

    def extract_stages(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Pre-STN maps of the three stages (no transforms applied)."""
        out = []
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
            out.append(h)
        return out

    def forward(self, x: torch.Tensor) -> FeatureSet:
        pre, post, thetas = [], [], []
        h = self.stem(x)
        for stage, stn in zip(self.stages, self.stns):
            h = stage(h)
            transformed, theta = stn(h)
            pre.append(h)
            post.append(transformed)
            thetas.append(theta)
            if self.chain == "post":
                h = transformed
        return FeatureSet(pre, post, thetas)


def predict_affine(stn: SpatialTransformer, feature: torch.Tensor) -> List[AffineParams]:
    with torch.no_grad():
        theta = stn.predict(feature if feature.dim() == 4 else feature[None])
    return [AffineParams(t.double().numpy(), stn.mode) for t in theta]


def stage_shapes(side: int):
    """(C, H, W) of each stage for a ``side`` x ``side`` input."""
    shapes = []
    n = -(-side // 4)  # stride-2 conv then stride-2 pool, both rounding up
    for c in STAGE_CHANNELS:
        shapes.append((c, n, n))
        n = -(-n // 2)
    return shapes
