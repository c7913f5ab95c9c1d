"""Differentiable lens-occlusion models and the alpha compositor.

Alpha convention everywhere: ``alpha == 1`` means the scene is fully visible,
``alpha == 0`` means the occluder fully covers it, so a composite is

    y = alpha * scene + (1 - alpha) * occ_image

Occluders are described by a :class:`DropField` (the stochastic part, never
optimised) and rendered with :class:`PhysicalParams` (the defocus ``sigma``,
which is differentiable).
"""
from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ContractError, ParameterRangeError
from .imagecore import bilinear_sample, blur_radius, gaussian_psf_blur, identity_coords

KINDS = ("drop", "dirt", "overlay", "gaussian", "refract")


@dataclass
class OcclusionConfig:
    """Knobs of the occlusion models. Ranges are in pixels unless noted."""

    kind: str = "drop"
    p_r: float = 0.5
    r_min: float = 3.0
    r_max: float = 6.0
    magnification: float = 1.5
    rho_range: tuple = (0.6, 1.0)
    sigma_max: float = 8.0
    color_range: tuple = ((0.05, 0.11), (0.45, 0.8), (0.15, 0.45))  # HSV boxes
    overlay_path: Optional[str] = None
    shape_amp_max: float = 0.2
    shape_noise: float = 0.05
    gaussian_peak: float = 0.8
    gaussian_width: float = 0.5  # std of the ablation occluder, as a fraction of radius

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown occlusion kind {self.kind!r}")
        if not 0.0 <= self.p_r <= 1.0:
            raise ParameterRangeError(f"p_r={self.p_r} outside [0, 1]")
        if not 0.0 < self.r_min <= self.r_max:
            raise ParameterRangeError(f"bad radius range ({self.r_min}, {self.r_max})")
        self.rho_range = tuple(self.rho_range)
        self.color_range = tuple(tuple(c) for c in self.color_range)

    @property
    def max_reach(self) -> float:
        """Largest distance from a drop centre its support can extend to."""
        return self.r_max * (1.0 + 2.0 * self.shape_amp_max + self.shape_noise)


@dataclass(frozen=True)
class DropSpec:
    center: tuple  # (u, v)
    radius: float
    shape_coeffs: tuple = (0.0, 0.0, 0.0, 0.0)  # a1, phi1, a2, phi2
    thickness_rho: float = 1.0
    noise: tuple = ()  # periodic radial noise samples, fraction of radius

    def __post_init__(self):
        if not 0.0 < self.thickness_rho <= 1.0:
            raise ParameterRangeError(f"thickness_rho={self.thickness_rho} outside (0, 1]")
        if self.radius <= 0:
            raise ParameterRangeError(f"radius={self.radius} must be positive")

    def boundary(self, theta: np.ndarray) -> np.ndarray:
        """Support radius r(theta)."""
        a1, p1, a2, p2 = self.shape_coeffs
        r = self.radius * (1.0 + a1 * np.sin(theta + p1) + a2 * np.sin(2 * theta + p2))
        if self.noise:
            k = len(self.noise)
            pos = np.mod(theta, 2 * np.pi) / (2 * np.pi) * k
            i0 = np.floor(pos).astype(int) % k
            frac = pos - np.floor(pos)
            samples = np.asarray(self.noise)
            r = r + self.radius * ((1 - frac) * samples[i0] + frac * samples[(i0 + 1) % k])
        return r


@dataclass(frozen=True)
class DropField:
    drops: tuple
    seed: int
    extent: tuple  # (H, W)

    def __len__(self):
        return len(self.drops)


@dataclass
class PhysicalParams:
    kind: str = "drop"
    sigma: object = 2.0  # float or 0-d tensor

    def sigma_value(self) -> float:
        return float(self.sigma.detach()) if torch.is_tensor(self.sigma) else float(self.sigma)


@dataclass
class DisplacementMap:
    U: torch.Tensor
    V: torch.Tensor
    rho: torch.Tensor
    support: torch.Tensor  # binary indicator of drop interiors
    owner: torch.Tensor = field(default=None)  # index of the drop owning a pixel, -1 outside

    def as_image(self) -> torch.Tensor:
        """The (U, V, rho) triple packed as a 3-channel tensor."""
        return torch.stack([self.U, self.V, self.rho])


@dataclass
class OcclusionRender:
    occ_image: torch.Tensor
    alpha: torch.Tensor  # (1, H, W) or (B, 1, H, W)


# ---------------------------------------------------------------------------
# stochastic placement


def sample_drop_field(
    seed: int,
    extent: Sequence[int],
    p_r: float,
    size_range: Sequence[float],
    allowed_mask=None,
    *,
    rho_range=(0.6, 1.0),
    shape_amp_max: float = 0.2,
    shape_noise: float = 0.05,
    noise_samples: int = 16,
) -> DropField:
    """Place drops by tiling the image into cells one max-diameter wide.

    Each cell independently holds a drop with probability ``p_r``; its centre is
    uniform inside the cell. Drops whose centre falls where ``allowed_mask`` is
    false are dropped.
    """
    h, w = int(extent[0]), int(extent[1])
    r_min, r_max = float(size_range[0]), float(size_range[1])
    if not 0.0 <= p_r <= 1.0:
        raise ParameterRangeError(f"p_r={p_r} outside [0, 1]")
    if not (0.0 < r_min <= r_max < min(h, w) / 2):
        raise ParameterRangeError(f"size_range {tuple(size_range)} not inside (0, {min(h, w) / 2})")
    if allowed_mask is not None:
        allowed_mask = np.asarray(
            allowed_mask.detach().cpu() if torch.is_tensor(allowed_mask) else allowed_mask, dtype=bool
        )
        if allowed_mask.shape != (h, w):
            raise ContractError(f"allowed_mask shape {allowed_mask.shape} != extent {(h, w)}")

    cell = 2.0 * r_max
    ny, nx = int(math.ceil(h / cell)), int(math.ceil(w / cell))
    n = ny * nx
    rng = np.random.default_rng(seed)
    # every quantity is drawn for every cell so the stream layout is independent of p_r
    spawn = rng.random(n) < p_r
    offs = rng.random((n, 2))
    radii = rng.uniform(r_min, r_max, n)
    amps = rng.uniform(0.0, shape_amp_max, (n, 2))
    phases = rng.uniform(0.0, 2 * np.pi, (n, 2))
    rhos = rng.uniform(rho_range[0], rho_range[1], n)
    noise = rng.uniform(-shape_noise, shape_noise, (n, noise_samples))

    drops = []
    for k in np.flatnonzero(spawn):
        cy, cx = divmod(int(k), nx)
        u = min(cx * cell + offs[k, 0] * cell, w - 1e-6)
        v = min(cy * cell + offs[k, 1] * cell, h - 1e-6)
        if allowed_mask is not None and not allowed_mask[int(v), int(u)]:
            continue
        drops.append(
            DropSpec(
                center=(float(u), float(v)),
                radius=float(radii[k]),
                shape_coeffs=(float(amps[k, 0]), float(phases[k, 0]), float(amps[k, 1]), float(phases[k, 1])),
                thickness_rho=float(min(max(rhos[k], 1e-6), 1.0)),
                noise=tuple(float(x) for x in noise[k]) if shape_noise > 0 else (),
            )
        )
    return DropField(drops=tuple(drops), seed=int(seed), extent=(h, w))


def field_from_config(seed: int, extent, cfg: OcclusionConfig, allowed_mask=None) -> DropField:
    f = sample_drop_field(
        seed,
        extent,
        cfg.p_r,
        (cfg.r_min, cfg.r_max),
        allowed_mask,
        rho_range=cfg.rho_range,
        shape_amp_max=cfg.shape_amp_max,
        shape_noise=cfg.shape_noise,
    )
    return strip_variability(f) if cfg.kind == "refract" else f


def strip_variability(field: DropField, rho: float = 1.0) -> DropField:
    """Circular drops of constant thickness: the reduced 'Refract' model."""
    drops = tuple(replace(d, shape_coeffs=(0.0, 0.0, 0.0, 0.0), noise=(), thickness_rho=rho) for d in field.drops)
    return replace(field, drops=drops)


# ---------------------------------------------------------------------------
# rasterisation


def rasterize_supports(field: DropField, extent=None):
    """Return ``(owner, du, dv)``: owning drop index per pixel (-1 outside) and offsets to its centre.

    Later drops in the list overwrite earlier ones.
    """
    h, w = extent if extent is not None else field.extent
    owner = np.full((h, w), -1, dtype=np.int64)
    du = np.zeros((h, w))
    dv = np.zeros((h, w))
    for i, d in enumerate(field.drops):
        cu, cv = d.center
        reach = d.radius * 2.0 + 1.0
        u0, u1 = max(int(math.floor(cu - reach)), 0), min(int(math.ceil(cu + reach)) + 1, w)
        v0, v1 = max(int(math.floor(cv - reach)), 0), min(int(math.ceil(cv + reach)) + 1, h)
        if u0 >= u1 or v0 >= v1:
            continue
        vv, uu = np.mgrid[v0:v1, u0:u1].astype(np.float64)
        ou, ov = uu - cu, vv - cv
        dist = np.hypot(ou, ov)
        inside = dist < d.boundary(np.arctan2(ov, ou))
        owner[v0:v1, u0:u1][inside] = i
        du[v0:v1, u0:u1][inside] = ou[inside]
        dv[v0:v1, u0:u1][inside] = ov[inside]
    return owner, du, dv


def drop_displacement(field: DropField, extent=None, magnification: float = 1.5, dtype=torch.float32) -> DisplacementMap:
    """Refraction displacement: pixel at offset d from a drop centre samples ``centre - m*d``.

    The sampling location is ``p + rho * (U, V)`` so with ``rho = 1`` each drop
    shows an inverted, magnified view of its neighbourhood.
    """
    h, w = extent if extent is not None else field.extent
    if h < 1 or w < 1:
        raise ContractError(f"degenerate extent {(h, w)}")
    owner, du, dv = rasterize_supports(field, (h, w))
    inside = owner >= 0
    scale = -(1.0 + magnification)
    rho = np.zeros((h, w))
    if inside.any():
        rhos = np.array([d.thickness_rho for d in field.drops])
        rho[inside] = rhos[owner[inside]]
    return DisplacementMap(
        U=torch.as_tensor(np.where(inside, scale * du, 0.0), dtype=dtype),
        V=torch.as_tensor(np.where(inside, scale * dv, 0.0), dtype=dtype),
        rho=torch.as_tensor(rho, dtype=dtype),
        support=torch.as_tensor(inside.astype(np.float64), dtype=dtype),
        owner=torch.as_tensor(owner),
    )


def _check_params(params: PhysicalParams, kinds, sigma_max: float):
    if params.kind not in kinds:
        raise ContractError(f"params.kind={params.kind!r}, expected one of {kinds}")
    value = params.sigma_value()
    if not (0.0 < value <= sigma_max) or not math.isfinite(value):
        raise ParameterRangeError(f"sigma={value} outside (0, {sigma_max}]")


def _alpha_like(support: torch.Tensor, scene: torch.Tensor) -> torch.Tensor:
    a = support.unsqueeze(0)
    if scene.dim() == 4:
        a = a.unsqueeze(0)
    return a.to(scene.dtype)


def render_raindrops(
    scene: torch.Tensor,
    field: DropField,
    params: PhysicalParams,
    cfg: Optional[OcclusionConfig] = None,
    displacement: Optional[DisplacementMap] = None,
) -> OcclusionRender:
    """Refractive, defocused raindrops over ``scene``.

    ``occ_image`` is the scene resampled through the displacement map and then
    blurred; ``alpha = 1 - blur(support)``.
    """
    cfg = cfg or OcclusionConfig()
    _check_params(params, ("drop", "refract"), cfg.sigma_max)
    h, w = scene.shape[-2:]
    if tuple(field.extent) != (h, w):
        raise ContractError(f"field extent {field.extent} != scene extent {(h, w)}")
    if displacement is None:
        displacement = drop_displacement(field, (h, w), cfg.magnification, dtype=scene.dtype)
    if not field.drops:
        alpha = torch.ones_like(_alpha_like(displacement.support, scene))
        return OcclusionRender(occ_image=torch.zeros_like(scene), alpha=alpha)
    coords = identity_coords(h, w, dtype=scene.dtype)
    offset = torch.stack([displacement.U, displacement.V], dim=-1) * displacement.rho.unsqueeze(-1)
    refracted = bilinear_sample(scene, coords + offset)
    occ = gaussian_psf_blur(refracted, params.sigma, cfg.sigma_max)
    cover = gaussian_psf_blur(_alpha_like(displacement.support, scene), params.sigma, cfg.sigma_max)
    return OcclusionRender(occ_image=occ, alpha=1.0 - cover)


def blob_colors(field: DropField, color_range) -> np.ndarray:
    """Per-blob RGB colours drawn from HSV boxes, seeded by the field."""
    rng = np.random.default_rng([field.seed, 0xD127])
    (h0, h1), (s0, s1), (v0, v1) = color_range
    hsv = np.column_stack(
        [rng.uniform(h0, h1, len(field)), rng.uniform(s0, s1, len(field)), rng.uniform(v0, v1, len(field))]
    )
    return np.array([colorsys.hsv_to_rgb(*c) for c in hsv]).reshape(-1, 3)


def render_dirt(
    scene: torch.Tensor,
    field: DropField,
    params: PhysicalParams,
    color_range=None,
    cfg: Optional[OcclusionConfig] = None,
) -> OcclusionRender:
    """Opaque flat-coloured blobs whose only transparency comes from defocus.

    The colour layer is blurred premultiplied by coverage, so
    ``(1 - alpha) * occ_image == blur(support * colour)``.
    """
    cfg = cfg or OcclusionConfig(kind="dirt")
    color_range = color_range if color_range is not None else cfg.color_range
    _check_params(params, ("dirt",), cfg.sigma_max)
    h, w = scene.shape[-2:]
    if tuple(field.extent) != (h, w):
        raise ContractError(f"field extent {field.extent} != scene extent {(h, w)}")
    owner, _, _ = rasterize_supports(field, (h, w))
    inside = owner >= 0
    support = _alpha_like(torch.as_tensor(inside.astype(np.float64), dtype=scene.dtype), scene)
    if not field.drops:
        return OcclusionRender(occ_image=torch.zeros_like(scene), alpha=torch.ones_like(support))
    colors = blob_colors(field, color_range)
    layer = np.zeros((3, h, w))
    layer[:, inside] = colors[owner[inside]].T
    layer = torch.as_tensor(layer, dtype=scene.dtype)
    if scene.shape[-3] == 1:
        layer = layer.mean(0, keepdim=True)
    if scene.dim() == 4:
        layer = layer.unsqueeze(0)
    cover = gaussian_psf_blur(support, params.sigma, cfg.sigma_max)
    premult = gaussian_psf_blur(layer, params.sigma, cfg.sigma_max)
    occ = premult / cover.clamp_min(1e-8)
    occ = torch.where(cover > 1e-8, occ, torch.zeros_like(occ)).clamp(0.0, 1.0)
    return OcclusionRender(occ_image=occ.expand_as(scene), alpha=1.0 - cover)


def _shift(t: torch.Tensor, du: int, dv: int, fill: float) -> torch.Tensor:
    out = torch.full_like(t, fill)
    h, w = t.shape[-2:]
    src_v = slice(max(-dv, 0), min(h - dv, h))
    dst_v = slice(max(dv, 0), min(h + dv, h))
    src_u = slice(max(-du, 0), min(w - du, w))
    dst_u = slice(max(du, 0), min(w + du, w))
    if src_v.start < src_v.stop and src_u.start < src_u.stop:
        out[..., dst_v, dst_u] = t[..., src_v, src_u]
    return out


def render_overlay(
    scene: torch.Tensor, overlay: torch.Tensor, overlay_alpha: torch.Tensor, translation=(0, 0)
) -> OcclusionRender:
    """Alpha-blended layer (watermark, fence, ...) shifted by an integer ``(du, dv)``.

    Nothing here is regressed; uncovered pixels get ``alpha = 1``.
    """
    h, w = scene.shape[-2:]
    if overlay.shape[-2:] != (h, w) or overlay_alpha.shape[-2:] != (h, w):
        raise ContractError("overlay and scene extents differ")
    du, dv = int(round(translation[0])), int(round(translation[1]))
    if abs(du) > w or abs(dv) > h:
        raise ParameterRangeError(f"translation {(du, dv)} exceeds extent {(h, w)}")
    if overlay_alpha.dim() == 2:
        overlay_alpha = overlay_alpha.unsqueeze(0)
    occ = _shift(overlay.to(scene.dtype), du, dv, 0.0)
    alpha = _shift(overlay_alpha.to(scene.dtype), du, dv, 1.0)
    if scene.dim() == 4:
        occ = occ.unsqueeze(0) if occ.dim() == 3 else occ
        alpha = alpha.unsqueeze(0) if alpha.dim() == 3 else alpha
    return OcclusionRender(occ_image=occ.expand_as(scene), alpha=alpha)


def render_gaussian_ablation(
    scene: torch.Tensor, field: DropField, cfg: Optional[OcclusionConfig] = None
) -> OcclusionRender:
    """Scene-independent white occluders with Gaussian opacity profiles.

    Each drop has opacity ``peak * exp(-|p - c|^2 / 2 s^2)`` with
    ``s = gaussian_width * radius``, truncated at ``3 s``; transparencies of
    several drops multiply.
    """
    cfg = cfg or OcclusionConfig(kind="gaussian")
    h, w = scene.shape[-2:]
    transparency = np.ones((h, w))
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    for d in field.drops:
        s = cfg.gaussian_width * d.radius
        d2 = (uu - d.center[0]) ** 2 + (vv - d.center[1]) ** 2
        opacity = cfg.gaussian_peak * np.exp(-d2 / (2 * s * s))
        opacity[d2 > (3 * s) ** 2] = 0.0
        transparency *= 1.0 - opacity
    alpha = _alpha_like(torch.as_tensor(transparency, dtype=scene.dtype), scene)
    occ = torch.ones(scene.shape, dtype=scene.dtype)
    return OcclusionRender(occ_image=occ, alpha=alpha)


def render(scene: torch.Tensor, field: DropField, params: PhysicalParams, cfg: OcclusionConfig, overlay=None, translation=(0, 0)):
    """Dispatch on ``cfg.kind``."""
    kind = cfg.kind
    if kind in ("drop", "refract"):
        if kind == "refract":
            field = strip_variability(field)
        return render_raindrops(scene, field, replace(params, kind=kind), cfg)
    if kind == "dirt":
        return render_dirt(scene, field, replace(params, kind="dirt"), cfg.color_range, cfg)
    if kind == "gaussian":
        return render_gaussian_ablation(scene, field, cfg)
    if kind == "overlay":
        if overlay is None:
            raise ContractError("overlay kind needs (overlay, overlay_alpha)")
        return render_overlay(scene, overlay[0], overlay[1], translation)
    raise ContractError(f"unknown occlusion kind {kind!r}")


def composite(scene: torch.Tensor, render_out: OcclusionRender) -> torch.Tensor:
    """``alpha * scene + (1 - alpha) * occ_image`` per pixel and channel."""
    occ, alpha = render_out.occ_image, render_out.alpha
    if occ.shape[-2:] != scene.shape[-2:] or alpha.shape[-2:] != scene.shape[-2:]:
        raise ContractError(
            f"extent mismatch: scene {tuple(scene.shape)}, occ {tuple(occ.shape)}, alpha {tuple(alpha.shape)}"
        )
    return alpha * scene + (1 - alpha) * occ


# ---------------------------------------------------------------------------
# procedural overlays


def fence_overlay(extent, spacing: int = 12, thickness: int = 2, color=(0.35, 0.35, 0.38)):
    """Diagonal lattice; returns ``(rgb, alpha)`` with alpha 0 on the wires."""
    h, w = extent
    vv, uu = np.mgrid[0:h, 0:w]
    wire = ((uu + vv) % spacing < thickness) | ((uu - vv) % spacing < thickness)
    rgb = torch.as_tensor(np.broadcast_to(np.asarray(color)[:, None, None], (3, h, w)).copy(), dtype=torch.float32)
    alpha = torch.as_tensor(np.where(wire, 0.0, 1.0)[None], dtype=torch.float32)
    return rgb, alpha


def watermark_overlay(extent, text: str = "CONFIDENTIAL", opacity: float = 0.6, color=(1.0, 1.0, 1.0)):
    """Text stamped across the image centre."""
    from PIL import Image as PILImage, ImageDraw

    h, w = extent
    canvas = PILImage.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    box = draw.textbbox((0, 0), text)
    tw, th = box[2] - box[0], box[3] - box[1]
    draw.text(((w - tw) // 2, (h - th) // 2), text, fill=255)
    ink = np.asarray(canvas, dtype=np.float64) / 255.0
    rgb = torch.as_tensor(np.broadcast_to(np.asarray(color)[:, None, None], (3, h, w)).copy(), dtype=torch.float32)
    alpha = torch.as_tensor((1.0 - opacity * ink)[None], dtype=torch.float32)
    return rgb, alpha


def dilate(mask, radius: float) -> np.ndarray:
    """Binary dilation by a disc (used to bound where injected occluders may appear)."""
    from scipy.ndimage import binary_dilation

    mask = np.asarray(mask, dtype=bool)
    r = int(math.ceil(radius))
    vv, uu = np.mgrid[-r : r + 1, -r : r + 1]
    return binary_dilation(mask, structure=(uu * uu + vv * vv) <= radius * radius)


def injection_reach(cfg: OcclusionConfig) -> float:
    """Distance beyond a drop centre at which its render can still touch alpha."""
    return cfg.max_reach + blur_radius(cfg.sigma_max) + 1.0
