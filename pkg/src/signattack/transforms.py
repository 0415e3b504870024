"""Parameterized sign transformations: rotation, perspective, scale, color jitter, noise background.

A transformation resamples the sign (and its alpha mask) through a single
homography with bilinear interpolation, jitters the sign colors, and fills
everything outside the transformed sign with seeded uniform noise.  The
resampling path is built from torch ops so gradients flow through it, which
the white-box attack relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class SignImage:
    """RGB float image in [0, 1] plus an optional alpha mask of the sign region."""

    rgb: np.ndarray
    alpha: np.ndarray | None = None

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ShapeError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if self.alpha is not None and self.alpha.shape != self.rgb.shape[:2]:
            raise ShapeError(f"alpha {self.alpha.shape} does not match rgb {self.rgb.shape[:2]}")

    @property
    def mask(self) -> np.ndarray:
        """Binary sign-region mask (all ones when no alpha is present)."""
        if self.alpha is None:
            return np.ones(self.rgb.shape[:2], dtype=np.float32)
        return (self.alpha > 0.5).astype(np.float32)


@dataclass(frozen=True)
class TransformParams:
    rotation_deg: float = 0.0
    # (dx, dy) per canvas corner in order TL, TR, BR, BL, as fractions of width/height
    perspective_shift: tuple = (0.0,) * 8
    brightness_delta: float = 0.0
    contrast_factor: float = 1.0
    saturation_factor: float = 1.0
    scale_factor: float = 1.0
    background_noise_seed: int = 0

    def __post_init__(self):
        if self.scale_factor <= 0:
            raise ParameterError(f"scale_factor must be positive, got {self.scale_factor}")
        if self.contrast_factor <= 0 or self.saturation_factor <= 0:
            raise ParameterError("contrast and saturation factors must be positive")
        if len(self.perspective_shift) != 8:
            raise ParameterError("perspective_shift needs 8 entries (dx, dy for 4 corners)")


IDENTITY_PARAMS = TransformParams()


@dataclass(frozen=True)
class TransformRanges:
    """Min/max bounds for every transformation parameter."""

    rotation_deg: tuple = (-15.0, 15.0)
    corner_shift: tuple = (-0.10, 0.10)
    brightness_delta: tuple = (-0.15, 0.15)
    contrast_factor: tuple = (0.7, 1.3)
    saturation_factor: tuple = (0.7, 1.3)
    scale_factor: tuple = (0.5, 1.2)
    rng_seed: int = 0

    def __post_init__(self):
        for f in dc_fields(self):
            if f.name == "rng_seed":
                continue
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ParameterError(f"{f.name}: min {lo} > max {hi}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)

    def as_dict(self) -> dict:
        out = {f.name: list(getattr(self, f.name)) for f in dc_fields(self) if f.name != "rng_seed"}
        out["rng_seed"] = self.rng_seed
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TransformRanges":
        kwargs = {k: (tuple(v) if isinstance(v, (list, tuple)) else v) for k, v in d.items()}
        return cls(**kwargs)


def sample(ranges: TransformRanges, rng: np.random.Generator) -> TransformParams:
    """Uniform draw of every parameter within its bounds; advances rng deterministically."""
    u = lambda lo, hi: float(lo + (hi - lo) * rng.random())
    corners = tuple(u(*ranges.corner_shift) for _ in range(8))
    return TransformParams(
        rotation_deg=u(*ranges.rotation_deg),
        perspective_shift=corners,
        brightness_delta=u(*ranges.brightness_delta),
        contrast_factor=u(*ranges.contrast_factor),
        saturation_factor=u(*ranges.saturation_factor),
        scale_factor=u(*ranges.scale_factor),
        background_noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def sample_many(ranges: TransformRanges, rng: np.random.Generator, n: int) -> list[TransformParams]:
    return [sample(ranges, rng) for _ in range(n)]


def _perspective_forward(shift: tuple, w: int, h: int) -> np.ndarray:
    """3x3 homography mapping canvas corners onto their shifted positions."""
    if all(s == 0.0 for s in shift):
        return np.eye(3)
    src = np.array([(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)])
    off = np.array(shift, dtype=np.float64).reshape(4, 2) * np.array([w, h], dtype=np.float64)
    dst = src + off
    # convexity of the destination quad: consecutive edge cross products share a sign
    e = np.roll(dst, -1, axis=0) - dst
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    if not (np.all(cross > 1e-9) or np.all(cross < -1e-9)):
        raise ParameterError(f"perspective corners {shift} produce a degenerate (non-convex) quad")
    # standard 8-point DLT for the homography src -> dst
    a, b = [], []
    for (sx, sy), (dx, dy) in zip(src, dst):
        a.append([sx, sy, 1, 0, 0, 0, -dx * sx, -dx * sy])
        a.append([0, 0, 0, sx, sy, 1, -dy * sx, -dy * sy])
        b.extend([dx, dy])
    try:
        coeffs = np.linalg.solve(np.array(a), np.array(b))
    except np.linalg.LinAlgError as exc:
        raise ParameterError(f"perspective corners {shift} are not invertible: {exc}") from None
    return np.append(coeffs, 1.0).reshape(3, 3)


def _homography_out_to_in(params: TransformParams, h: int, w: int) -> np.ndarray:
    """Matrix taking output pixel-center coordinates to input coordinates."""
    theta = np.deg2rad(params.rotation_deg)
    s = params.scale_factor
    cx, cy = w / 2.0, h / 2.0
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # inverse of p_out = s * R(theta) (p_in - c) + c
    sim_inv = np.array(
        [
            [cos_t / s, sin_t / s, cx - (cos_t * cx + sin_t * cy) / s],
            [-sin_t / s, cos_t / s, cy - (-sin_t * cx + cos_t * cy) / s],
            [0.0, 0.0, 1.0],
        ]
    )
    persp = _perspective_forward(params.perspective_shift, w, h)
    try:
        persp_inv = np.linalg.inv(persp)
    except np.linalg.LinAlgError as exc:
        raise ParameterError(f"perspective quad is not invertible: {exc}") from None
    return sim_inv @ persp_inv


def _grids(params_list: list[TransformParams], h: int, w: int) -> torch.Tensor:
    """(N, H, W, 2) sampling grid in grid_sample's align_corners=False convention."""
    mats = np.stack([_homography_out_to_in(p, h, w) for p in params_list])
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=0)  # (3, HW)
    q = np.einsum("nij,jp->nip", mats, pts)
    denom = q[:, 2, :]
    if np.any(denom <= 1e-9):
        raise ParameterError("perspective mapping folds through infinity on the canvas")
    gx = 2.0 * (q[:, 0, :] / denom) / w - 1.0
    gy = 2.0 * (q[:, 1, :] / denom) / h - 1.0
    grid = np.stack([gx, gy], axis=-1).reshape(len(params_list), h, w, 2)
    return torch.from_numpy(grid.astype(np.float32))


def _jitter(rgb: torch.Tensor, params: TransformParams) -> torch.Tensor:
    """Saturation, contrast about 0.5, then brightness; channels-last tensors."""
    luma = torch.as_tensor(LUMA, dtype=rgb.dtype)
    gray = (rgb * luma).sum(dim=-1, keepdim=True)
    v = gray + (rgb - gray) * params.saturation_factor
    v = (v - 0.5) * params.contrast_factor + 0.5
    return (v + params.brightness_delta).clamp(0.0, 1.0)


def _background(params: TransformParams, h: int, w: int) -> torch.Tensor:
    noise = np.random.default_rng(params.background_noise_seed).random((h, w, 3), dtype=np.float32)
    return torch.from_numpy(noise)


def transform_batch(
    rgb: torch.Tensor, alpha: torch.Tensor, params: TransformParams
) -> torch.Tensor:
    """Apply one transformation to a batch of (N, H, W, 3) images sharing one alpha mask.

    Differentiable with respect to rgb; alpha and the noise background are
    treated as constants.
    """
    n, h, w, _ = rgb.shape
    grid = _grids([params], h, w)
    rgb_t = F.grid_sample(
        rgb.permute(0, 3, 1, 2),
        grid.expand(n, -1, -1, -1),
        mode="bilinear",
        padding_mode="border",
        align_corners=False,
    ).permute(0, 2, 3, 1)
    alpha_t = F.grid_sample(
        alpha[None, None].to(rgb.dtype),
        grid,
        mode="bilinear",
        padding_mode="zeros",
        align_corners=False,
    )[0, 0]
    sign = _jitter(rgb_t, params)
    noise = _background(params, h, w).to(rgb.dtype)
    a = alpha_t[None, :, :, None]
    return a * sign + (1.0 - a) * noise


def apply(image: SignImage, params: TransformParams) -> SignImage:
    """Transform a single sign image; returns the composited image and warped alpha."""
    rgb = torch.from_numpy(np.ascontiguousarray(image.rgb, dtype=np.float32))
    alpha = torch.from_numpy(
        np.ascontiguousarray(image.alpha if image.alpha is not None else image.mask, dtype=np.float32)
    )
    with torch.no_grad():
        out = transform_batch(rgb[None], alpha, params)[0]
        h, w = image.rgb.shape[:2]
        alpha_t = F.grid_sample(
            alpha[None, None], _grids([params], h, w), mode="bilinear",
            padding_mode="zeros", align_corners=False,
        )[0, 0]
    return SignImage(rgb=out.numpy(), alpha=alpha_t.numpy())


def apply_many(image: SignImage, params_list: list[TransformParams]) -> np.ndarray:
    """Transform one sign under many different parameter draws; (N, H, W, 3) float32."""
    h, w = image.rgb.shape[:2]
    n = len(params_list)
    rgb = torch.from_numpy(np.ascontiguousarray(image.rgb, dtype=np.float32))
    alpha = torch.from_numpy(np.ascontiguousarray(
        image.alpha if image.alpha is not None else image.mask, dtype=np.float32))
    grids = _grids(params_list, h, w)
    with torch.no_grad():
        rgb_t = F.grid_sample(
            rgb[None].permute(0, 3, 1, 2).expand(n, -1, -1, -1), grids,
            mode="bilinear", padding_mode="border", align_corners=False,
        ).permute(0, 2, 3, 1)
        alpha_t = F.grid_sample(
            alpha[None, None].expand(n, -1, -1, -1), grids,
            mode="bilinear", padding_mode="zeros", align_corners=False,
        )[:, 0]
        luma = torch.as_tensor(LUMA)
        gray = (rgb_t * luma).sum(dim=-1, keepdim=True)
        sat = torch.tensor([p.saturation_factor for p in params_list]).view(n, 1, 1, 1)
        con = torch.tensor([p.contrast_factor for p in params_list]).view(n, 1, 1, 1)
        bri = torch.tensor([p.brightness_delta for p in params_list]).view(n, 1, 1, 1)
        sign = ((gray + (rgb_t - gray) * sat - 0.5) * con + 0.5 + bri).clamp(0.0, 1.0)
        noise = torch.stack([_background(p, h, w) for p in params_list])
        a = alpha_t[..., None]
        out = a * sign + (1.0 - a) * noise
    return out.numpy()
