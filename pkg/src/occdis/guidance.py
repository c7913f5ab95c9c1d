"""Disentanglement guidance: dataset- and layer-averaged GradCAM of a frozen discriminator.

High values mark regions the discriminator relies on to call an image fake,
i.e. a large source/target gap. Occluders are injected only where the map is
below ``beta``.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, ParameterRangeError, RegistryError
from .imagecore import write_png

DG_MAGIC = b"DGM1"
_HEADER = struct.Struct("<4sIII")  # magic, H, W, reserved


def _fake_score(scores) -> torch.Tensor:
    # LSGAN: fake -> 0, so lower patch scores mean "more fake"
    maps = scores if isinstance(scores, (list, tuple)) else [scores]
    return -torch.stack([m.mean() for m in maps]).sum()


def gradcam_layer(D, x: torch.Tensor, layer_id: str) -> torch.Tensor:
    """Rectified GradCAM heatmap of ``layer_id`` upsampled to the image extent.

    Channel weights are the spatial mean of d(fake score)/d(activation).
    Returns ``(H, W)`` for a single image or ``(B, H, W)`` for a batch.
    """
    return gradcam_layers(D, x, [layer_id])[layer_id]


def gradcam_layers(D, x: torch.Tensor, layer_ids: Optional[Iterable[str]] = None) -> dict:
    squeeze = x.dim() == 3
    xb = x.unsqueeze(0) if squeeze else x
    known = list(D.layer_ids)
    layer_ids = known if layer_ids is None else list(layer_ids)
    for lid in layer_ids:
        if lid not in known:
            raise RegistryError(f"unknown discriminator layer {lid!r}; known: {known}")
    with torch.enable_grad():
        scores, acts = D(xb.detach(), capture=True)
        chosen = [acts[lid] for lid in layer_ids]
        score = _fake_score(scores)
        if score.requires_grad:
            grads = torch.autograd.grad(score, chosen, allow_unused=True)
        else:
            grads = [None] * len(chosen)
    h, w = xb.shape[-2:]
    out = {}
    for lid, a, g in zip(layer_ids, chosen, grads):
        if g is None:
            g = torch.zeros_like(a)
        weights = g.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * a.detach()).sum(1, keepdim=True))
        cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)[:, 0]
        out[lid] = cam[0] if squeeze else cam
    return out


def minmax(m: torch.Tensor, dims=(-2, -1)) -> torch.Tensor:
    """Min-max normalise over ``dims``; constant maps become all zeros."""
    lo = m.amin(dim=dims, keepdim=True)
    hi = m.amax(dim=dims, keepdim=True)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (m - lo) / safe, torch.zeros_like(m))


@dataclass
class GuidanceMap:
    values: torch.Tensor  # (H, W) in [0, 1]
    provenance: str = ""

    @property
    def shape(self):
        return tuple(self.values.shape)


@dataclass
class InjectionMask:
    mask: torch.Tensor  # (H, W) bool
    beta: float


def _digest(D, dataset: torch.Tensor) -> str:
    h = hashlib.sha256()
    for t in D.state_dict().values():
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    h.update(dataset.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def per_image_guidance(D, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    """Layer-averaged, per-layer-normalised GradCAM for each image: ``(N, H, W)``."""
    maps = []
    for i in range(0, images.shape[0], batch_size):
        cams = gradcam_layers(D, images[i : i + batch_size])
        stacked = torch.stack([minmax(c) for c in cams.values()])  # (L, B, H, W)
        maps.append(stacked.mean(0))
    return torch.cat(maps)


def compute_dg(D, dataset: torch.Tensor, batch_size: int = 16) -> GuidanceMap:
    """Average per-image guidance over the dataset and rescale to [0, 1]."""
    if dataset is None or dataset.shape[0] == 0:
        raise ContractError("compute_dg needs a non-empty dataset")
    if dataset.dim() != 4:
        raise ContractError(f"dataset must be (N, C, H, W), got {tuple(dataset.shape)}")
    was_training = D.training
    D.eval()
    try:
        per_image = per_image_guidance(D, dataset, batch_size)
    finally:
        D.train(was_training)
    dg = minmax(per_image.double().mean(0)).float()
    return GuidanceMap(values=dg, provenance=_digest(D, dataset))


def injection_mask(dg, beta: float) -> InjectionMask:
    if not 0.0 <= beta <= 1.0:
        raise ParameterRangeError(f"beta={beta} outside [0, 1]")
    values = dg.values if isinstance(dg, GuidanceMap) else torch.as_tensor(dg)
    return InjectionMask(mask=values < beta, beta=float(beta))


def save_dg(path, dg: GuidanceMap, preview: Optional[str] = None) -> None:
    """Little-endian float32 grid behind a 16-byte header ``(magic, H, W, 0)``."""
    values = dg.values.detach().cpu().numpy().astype("<f4")
    h, w = values.shape
    with open(os.fspath(path), "wb") as fh:
        fh.write(_HEADER.pack(DG_MAGIC, h, w, 0))
        fh.write(values.tobytes(order="C"))
    if preview is not None:
        write_png(preview, dg.values.unsqueeze(0))


def load_dg(path) -> GuidanceMap:
    with open(os.fspath(path), "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ContractError(f"{path}: truncated guidance file")
    magic, h, w, _ = _HEADER.unpack_from(blob)
    if magic != DG_MAGIC:
        raise ContractError(f"{path}: bad magic {magic!r}")
    body = blob[_HEADER.size :]
    if len(body) != 4 * h * w:
        raise ContractError(f"{path}: expected {4 * h * w} payload bytes, got {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(h, w).copy()
    return GuidanceMap(values=torch.from_numpy(values), provenance=f"file:{os.path.basename(path)}")
