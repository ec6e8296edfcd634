"""Constrained 2-D affine transforms on feature maps.

``theta = [L | t]`` maps output (target) coordinates to source coordinates in
the normalized [-1, 1] frame, the same convention as ``F.affine_grid`` with
``align_corners=False``: ``out(x) = in(theta @ [x, 1])``. Points falling
outside the source map read zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DET_FLOOR = 1e-3

# Free parameters per mode, in the order the localization head emits them.
MODE_PARAMS = {
    "none": (),
    "translation": ("tx", "ty"),
    "rotation": ("phi",),
    "scale": ("s",),
    "shear": ("shx", "shy"),
    "rotation_scale": ("s", "phi"),
    "translation_scale": ("s", "tx", "ty"),
    "translation_rotation": ("phi", "tx", "ty"),
    "translation_rotation_scale": ("s", "phi", "tx", "ty"),
    "affine": ("a11", "a12", "tx", "a21", "a22", "ty"),
}
MODES = tuple(MODE_PARAMS)

_IDENTITY_VALUE = {"tx": 0.0, "ty": 0.0, "phi": 0.0, "s": 1.0, "shx": 0.0, "shy": 0.0,
                   "a11": 1.0, "a12": 0.0, "a21": 0.0, "a22": 1.0}


class AffineError(ValueError):
    """Singular or malformed affine parameters."""


def check_mode(mode: str) -> None:
    if mode not in MODE_PARAMS:
        raise AffineError(f"unknown transformation mode {mode!r}; choose from {MODES}")


def identity_params(mode: str) -> torch.Tensor:
    """Free-parameter vector that yields the identity transform."""
    check_mode(mode)
    return torch.tensor([_IDENTITY_VALUE[p] for p in MODE_PARAMS[mode]])


def _clamp_linear(lin: torch.Tensor, floor: float) -> torch.Tensor:
    """Push general 2x2 matrices to |det| >= floor by lifting small singular values."""
    det = torch.linalg.det(lin)
    bad = det.abs() < floor
    if not bool(bad.any()):
        return lin
    u, s, vh = torch.linalg.svd(lin[bad])
    s = s.clamp(min=math.sqrt(floor) * (1 + 1e-6))
    fixed = u @ torch.diag_embed(s) @ vh
    out = lin.clone()
    out[bad] = fixed
    return out


def params_to_theta(params: torch.Tensor, mode: str, floor: float = DET_FLOOR) -> torch.Tensor:
    """Map B x n free parameters to B x 2 x 3 theta honoring the mode and det floor."""
    check_mode(mode)
    names = MODE_PARAMS[mode]
    if params.shape[-1] != len(names):
        raise AffineError(f"mode {mode!r} takes {len(names)} parameters, got {params.shape[-1]}")
    batch = params.shape[0]
    dtype, device = params.dtype, params.device
    p = {name: params[:, i] for i, name in enumerate(names)}
    one = torch.ones(batch, dtype=dtype, device=device)
    zero = torch.zeros(batch, dtype=dtype, device=device)

    if mode == "affine":
        lin = torch.stack([torch.stack([p["a11"], p["a12"]], -1),
                           torch.stack([p["a21"], p["a22"]], -1)], -2)
        lin = _clamp_linear(lin, floor)
    else:
        s = p["s"].clamp(min=math.sqrt(floor)) if "s" in p else one
        if "phi" in p:
            c, sn = torch.cos(p["phi"]), torch.sin(p["phi"])
        else:
            c, sn = one, zero
        if mode == "shear":
            a, b = p["shx"], p["shy"]
            ab = a * b
            limit = 1.0 - floor
            # det = 1 - ab; rescale both shears when ab would cross the floor.
            factor = torch.where(ab > limit, torch.sqrt(limit / ab.clamp(min=limit)), one)
            lin = torch.stack([torch.stack([one, a * factor], -1),
                               torch.stack([b * factor, one], -1)], -2)
        else:
            lin = torch.stack([torch.stack([s * c, -s * sn], -1),
                               torch.stack([s * sn, s * c], -1)], -2)
    tx = p.get("tx", zero)
    ty = p.get("ty", zero)
    trans = torch.stack([tx, ty], -1)[:, :, None]
    return torch.cat([lin, trans], dim=2)


def theta_to_params(theta: torch.Tensor, mode: str) -> torch.Tensor:
    """Closest free parameters of ``mode`` for arbitrary B x 2 x 3 thetas."""
    check_mode(mode)
    l00, l01, l02 = theta[:, 0, 0], theta[:, 0, 1], theta[:, 0, 2]
    l10, l11, l12 = theta[:, 1, 0], theta[:, 1, 1], theta[:, 1, 2]
    cos_part = (l00 + l11) / 2
    sin_part = (l10 - l01) / 2
    values = {
        "tx": l02, "ty": l12,
        "a11": l00, "a12": l01, "a21": l10, "a22": l11,
        "shx": l01, "shy": l10,
        "phi": torch.atan2(sin_part, cos_part),
    }
    if "phi" in MODE_PARAMS[mode]:
        values["s"] = torch.hypot(cos_part, sin_part)
    else:
        values["s"] = cos_part
    return torch.stack([values[name] for name in MODE_PARAMS[mode]], -1) \
        if MODE_PARAMS[mode] else theta.new_zeros(theta.shape[0], 0)


def project_theta(theta: torch.Tensor, mode: str) -> torch.Tensor:
    return params_to_theta(theta_to_params(theta, mode), mode)


def invert_theta(theta: torch.Tensor) -> torch.Tensor:
    """Batched ``[L | t] -> [L^-1 | -L^-1 t]``."""
    lin, trans = theta[..., :2], theta[..., 2:]
    inv = torch.linalg.inv(lin)
    return torch.cat([inv, -inv @ trans], dim=-1)


@dataclass
class AffineParams:
    """One 2 x 3 affine matrix and the mode it was produced under."""

    theta: np.ndarray
    mode: str = "affine"

    def __post_init__(self) -> None:
        check_mode(self.mode)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(2, 3)

    @classmethod
    def identity(cls, mode: str = "affine") -> "AffineParams":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), mode)

    @property
    def linear(self) -> np.ndarray:
        return self.theta[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.theta[:, 2]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.theta, [0.0, 0.0, 1.0]])

    def satisfies_mode(self, atol: float = 1e-6) -> bool:
        t = torch.from_numpy(self.theta)[None]
        return bool(torch.allclose(project_theta(t, self.mode), t, atol=atol))


def invert_affine(params: AffineParams, floor: float = DET_FLOOR) -> AffineParams:
    """Exact inverse, ``[L^-1 | -L^-1 t]``; refuses near-singular ``L``."""
    det = params.det
    if not abs(det) >= floor:
        raise AffineError(f"affine linear part is near-singular (det={det:.3g} < {floor:g})")
    inv = np.linalg.inv(params.linear)
    return AffineParams(np.hstack([inv, (-inv @ params.translation)[:, None]]), params.mode)


def _as_theta(theta, batch: int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(theta, AffineParams):
        theta = torch.from_numpy(theta.theta)
    theta = torch.as_tensor(theta)
    if theta.dim() == 2:
        theta = theta[None]
    theta = theta.to(dtype=like.dtype, device=like.device)
    if theta.shape[0] == 1 and batch > 1:
        theta = theta.expand(batch, 2, 3)
    if theta.shape != (batch, 2, 3):
        raise AffineError(f"theta must be {batch} x 2 x 3, got {tuple(theta.shape)}")
    return theta


def apply_affine(feature: torch.Tensor, theta) -> torch.Tensor:
    """Bilinearly resample ``feature`` (B x C x H x W or C x H x W) under ``theta``.

    Works in pixel-centered coordinates so an identity theta reproduces the
    input bit for bit; matches ``F.grid_sample(..., align_corners=False)``
    with zero padding otherwise. Differentiable in both arguments.
    """
    squeeze = feature.dim() == 3
    if squeeze:
        feature = feature[None]
    b, c, h, w = feature.shape
    theta = _as_theta(theta, b, feature)
    dtype, device = feature.dtype, feature.device

    # Centered pixel coordinates of the output grid.
    u = torch.arange(w, dtype=dtype, device=device) - (w - 1) / 2
    v = torch.arange(h, dtype=dtype, device=device) - (h - 1) / 2
    vt, ut = torch.meshgrid(v, u, indexing="ij")
    ut = ut.reshape(1, -1)
    vt = vt.reshape(1, -1)
    t = theta[:, :, :, None]
    us = t[:, 0, 0] * ut + t[:, 0, 1] * (w / h) * vt + t[:, 0, 2] * (w / 2)
    vs = t[:, 1, 0] * (h / w) * ut + t[:, 1, 1] * vt + t[:, 1, 2] * (h / 2)
    px = us + (w - 1) / 2
    py = vs + (h - 1) / 2

    x0 = torch.floor(px)
    y0 = torch.floor(py)
    wx1 = px - x0
    wy1 = py - y0
    wx0 = 1 - wx1
    wy0 = 1 - wy1
    x0 = x0.long()
    y0 = y0.long()

    flat = feature.reshape(b, c, h * w)
    out = feature.new_zeros(b, c, h * w)
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1))
            vals = torch.gather(flat, 2, idx[:, None, :].expand(b, c, h * w))
            weight = (wx * wy * valid.to(dtype))[:, None, :]
            out = out + vals * weight
    out = out.reshape(b, c, h, w)
    return out[0] if squeeze else out
