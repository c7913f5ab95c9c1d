"""Procedural street-like scenes, a known style transform and ground-truth occluded targets.

Every scene index ``k`` yields four aligned records: the clear source, the
styled scene, the styled scene with occlusions, and the occlusion alpha. The
training manifests pair disjoint index sets so training stays unpaired.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .imagecore import write_png
from .occlusions import OcclusionConfig, PhysicalParams, composite, field_from_config, render


@dataclass
class StyleTransform:
    """Per-channel affine colour shift plus a vertical luminance ramp.

    ``region='top'`` confines the shift to the upper half of the image.
    """

    gain: tuple = (0.75, 0.85, 1.05)
    bias: tuple = (0.0, 0.03, 0.1)
    vertical: float = -0.15  # added luminance at the bottom row minus top row
    region: str = "full"

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        h = image.shape[-2]
        gain = torch.as_tensor(self.gain, dtype=image.dtype).view(3, 1, 1)
        bias = torch.as_tensor(self.bias, dtype=image.dtype).view(3, 1, 1)
        ramp = torch.linspace(-0.5, 0.5, h, dtype=image.dtype).view(1, h, 1) * self.vertical
        styled = (gain * image + bias + ramp).clamp(0.0, 1.0)
        if self.region == "top":
            rows = torch.arange(h).view(1, h, 1) < h // 2
            styled = torch.where(rows, styled, image)
        elif self.region != "full":
            raise ValueError(f"unknown style region {self.region!r}")
        return styled


@dataclass
class SyntheticSpec:
    n_images: int = 600
    extent: tuple = (64, 64)
    style: StyleTransform = field(default_factory=StyleTransform)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)
    sigma_star: float = 2.0
    seed: int = 0
    n_train_source: int = 250
    n_train_target: int = 250  # remaining indices form the held-out evaluation split

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extent"] = list(self.extent)
        return d


def _box(img, rng, v0, v1, u0, u1, color):
    img[:, v0:v1, u0:u1] = np.asarray(color)[:, None, None]


def make_scene(rng: np.random.Generator, extent=(64, 64)) -> torch.Tensor:
    """Sky, buildings, trees and a road with lane markings, plus mild texture."""
    h, w = extent
    img = np.zeros((3, h, w))
    horizon = int(h * rng.uniform(0.38, 0.55))
    t = np.linspace(0, 1, horizon)[None, :, None]
    sky_top = np.array([0.35, 0.55, 0.85]) * rng.uniform(0.8, 1.1)
    sky_bot = np.array([0.75, 0.82, 0.9]) * rng.uniform(0.85, 1.05)
    img[:, :horizon] = sky_top[:, None, None] * (1 - t) + sky_bot[:, None, None] * t

    ground = np.array([0.32, 0.3, 0.28]) * rng.uniform(0.8, 1.2)
    img[:, horizon:] = ground[:, None, None]
    vv, uu = np.mgrid[0:h, 0:w]
    # road as a trapezoid converging to a vanishing point
    vp = rng.uniform(0.35, 0.65) * w
    depth = np.clip((vv - horizon) / max(h - horizon, 1), 0, 1)
    half = 2 + depth * w * rng.uniform(0.45, 0.6)
    road = (vv >= horizon) & (np.abs(uu - vp) < half)
    img[:, road] = (np.array([0.22, 0.22, 0.24]) * rng.uniform(0.8, 1.2))[:, None]
    lane = road & (np.abs(uu - vp) < 0.4 + depth * 1.2) & (((vv - horizon) // 3) % 2 == 0)
    img[:, lane] = np.array([0.9, 0.9, 0.85])[:, None]

    for _ in range(rng.integers(2, 6)):
        bw = int(rng.integers(w // 10, w // 3))
        bh = int(rng.integers(h // 8, max(horizon - 2, h // 8 + 1)))
        u0 = int(rng.integers(0, w - bw))
        if abs(u0 + bw / 2 - vp) < bw / 2 + 3:
            continue
        color = rng.uniform(0.2, 0.8, 3) * np.array([1.0, 0.95, 0.9])
        _box(img, rng, horizon - bh, horizon + 1, u0, u0 + bw, color)
        for wv in range(horizon - bh + 2, horizon - 2, 4):
            for wu in range(u0 + 2, u0 + bw - 2, 4):
                if rng.random() < 0.6:
                    _box(img, rng, wv, wv + 2, wu, wu + 2, color * rng.uniform(0.3, 0.6))
    for _ in range(rng.integers(0, 4)):
        cu, cv = rng.uniform(0, w), horizon - rng.uniform(0, h * 0.15)
        r = rng.uniform(3, 7)
        disc = (uu - cu) ** 2 + (vv - cv) ** 2 < r * r
        img[:, disc] = (np.array([0.15, 0.45, 0.15]) * rng.uniform(0.7, 1.3))[:, None]
    img += rng.normal(0.0, 0.015, img.shape)
    return torch.as_tensor(np.clip(img, 0.0, 1.0), dtype=torch.float32)


def make_record(k: int, spec: SyntheticSpec, with_occlusion: bool = True):
    """Return ``(source, styled, target, alpha)`` for scene index ``k``."""
    rng = np.random.default_rng([spec.seed, k])
    source = make_scene(rng, spec.extent)
    styled = spec.style(source)
    if not with_occlusion or spec.occlusion.p_r == 0:
        alpha = torch.ones(1, *spec.extent)
        return source, styled, styled.clone(), alpha
    fld = field_from_config(int(rng.integers(2**31)), spec.extent, spec.occlusion)
    out = render(styled, fld, PhysicalParams(spec.occlusion.kind, spec.sigma_star), spec.occlusion)
    target = composite(styled, out).clamp(0.0, 1.0)
    return source, styled, target, out.alpha


def make_synthetic_dataset(spec: SyntheticSpec, root) -> dict:
    """Write ``source/ gt_style/ target/ gt_masks/`` plus manifests under ``root``.

    Manifests hold newline-separated paths relative to ``root``; paired
    manifests put the aligned paths of one record on a line, space-separated.
    """
    root = os.fspath(root)
    for sub in ("source", "gt_style", "target", "gt_masks"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    names = []
    for k in range(spec.n_images):
        name = f"{k:05d}.png"
        source, styled, target, alpha = make_record(k, spec)
        write_png(os.path.join(root, "source", name), source)
        write_png(os.path.join(root, "gt_style", name), styled)
        write_png(os.path.join(root, "target", name), target)
        write_png(os.path.join(root, "gt_masks", name), alpha)
        names.append(name)
    a = spec.n_train_source
    b = a + spec.n_train_target
    manifests = {
        "train_source.txt": [f"source/{n}" for n in names[:a]],
        "train_target.txt": [f"target/{n}" for n in names[a:b]],
        "eval_source.txt": [f"source/{n}" for n in names[b:]],
        "eval_pairs.txt": [f"source/{n} gt_style/{n} gt_masks/{n}" for n in names[b:]],
        "target_pairs.txt": [f"target/{n} gt_style/{n} gt_masks/{n}" for n in names],
    }
    for fname, lines in manifests.items():
        with open(os.path.join(root, fname), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    with open(os.path.join(root, "spec.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
    return {k: os.path.join(root, k) for k in manifests}


def read_manifest(path) -> list:
    """Lines of a manifest, each split into its (one or more) relative paths."""
    with open(path) as fh:
        return [line.split() for line in fh if line.strip()]


def load_manifest_images(path, column: int = 0) -> torch.Tensor:
    from .imagecore import read_png

    root = os.path.dirname(os.fspath(path))
    rows = read_manifest(path)
    if not rows:
        raise ValueError(f"{path}: empty manifest")
    return torch.stack([read_png(os.path.join(root, r[column])) for r in rows])


def load_image_dir(directory) -> torch.Tensor:
    from .imagecore import read_png

    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    if not names:
        raise ValueError(f"{directory}: no PNG files")
    return torch.stack([read_png(os.path.join(directory, n)) for n in names])


def in_memory_set(n: int, spec: Optional[SyntheticSpec] = None, offset: int = 0, styled: bool = False) -> torch.Tensor:
    """Clear (or styled) scenes without touching disk."""
    spec = spec or SyntheticSpec()
    out = []
    for k in range(offset, offset + n):
        src = make_scene(np.random.default_rng([spec.seed, k]), spec.extent)
        out.append(spec.style(src) if styled else src)
    return torch.stack(out)
