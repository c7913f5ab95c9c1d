"""Image primitives: differentiable bilinear sampling, Gaussian PSF defocus, PNG I/O.

Images are torch tensors with values in [0, 1], laid out ``(C, H, W)`` or
``(B, C, H, W)``.  Coordinates are ``(..., H, W, 2)`` tensors holding
``(u, v) = (column, row)`` in pixel units with the origin at the top-left
pixel centre.
"""
from __future__ import annotations

import math
import os
from functools import lru_cache

import numpy as np
import torch
from PIL import Image as PILImage

from .errors import ContractError, ImageFormatError, ParameterRangeError

MIN_EXTENT = 8


def identity_coords(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Pixel-centre coordinate grid, shape ``(H, W, 2)``."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij"
    )
    return torch.stack([u, v], dim=-1)


def bilinear_sample(image: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` at real-valued ``coords`` with bilinear weights.

    Out-of-range coordinates are clamped to the border. Gradients flow to both
    the image values and the coordinates (the integer cell index is treated as
    piecewise constant).
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.numel() == 0:
        raise ContractError(f"expected a non-empty (B, C, H, W) image, got {tuple(image.shape)}")
    b, c, h, w = image.shape
    if coords.dim() == 3:
        coords = coords.unsqueeze(0).expand(b, *coords.shape)
    if coords.dim() != 4 or coords.shape[-1] != 2 or coords.shape[0] != b:
        raise ContractError(
            f"coords of shape {tuple(coords.shape)} do not match image batch {tuple(image.shape)}"
        )
    out_h, out_w = coords.shape[1:3]

    u = coords[..., 0].clamp(0, w - 1)
    v = coords[..., 1].clamp(0, h - 1)
    u0 = torch.floor(u.detach()).clamp(max=max(w - 2, 0))
    v0 = torch.floor(v.detach()).clamp(max=max(h - 2, 0))
    fu = (u - u0).unsqueeze(1)
    fv = (v - v0).unsqueeze(1)
    u0 = u0.long()
    v0 = v0.long()
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)

    flat = image.reshape(b, c, h * w)

    def corner(vi, ui):
        idx = (vi * w + ui).reshape(b, 1, -1).expand(b, c, -1)
        return flat.gather(2, idx).reshape(b, c, out_h, out_w)

    out = (
        (1 - fu) * (1 - fv) * corner(v0, u0)
        + fu * (1 - fv) * corner(v0, u1)
        + (1 - fu) * fv * corner(v1, u0)
        + fu * fv * corner(v1, u1)
    )
    return out.squeeze(0) if squeeze else out


def blur_radius(sigma_max: float) -> int:
    return int(math.ceil(3.0 * sigma_max))


@lru_cache(maxsize=64)
def _reflect_taps(n: int, radius: int) -> torch.Tensor:
    # mirror about the edge pixels without repeating them; period 2(n-1)
    taps = np.arange(n)[:, None] + np.arange(-radius, radius + 1)[None, :]
    if n == 1:
        return torch.zeros(taps.shape, dtype=torch.long)
    period = 2 * (n - 1)
    taps = np.mod(taps, period)
    taps = np.where(taps >= n, period - taps, taps)
    return torch.from_numpy(taps.astype(np.int64))


def gaussian_kernel1d(sigma, radius: int, dtype=torch.float64) -> torch.Tensor:
    """Renormalised truncated Gaussian taps on ``[-radius, radius]``."""
    sigma = torch.as_tensor(sigma, dtype=dtype)
    t = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(t * t) / (2 * sigma * sigma))
    return k / k.sum()


def blur_matrix(n: int, sigma, radius: int, dtype=torch.float32) -> torch.Tensor:
    """Dense ``(n, n)`` operator applying the 1-D blur with reflective borders."""
    k = gaussian_kernel1d(sigma, radius, dtype=dtype)
    taps = _reflect_taps(n, radius)
    m = torch.zeros(n, n, dtype=dtype)
    return m.scatter_add(1, taps, k.unsqueeze(0).expand(n, -1))


def check_sigma(sigma, sigma_max: float) -> float:
    value = float(sigma.detach()) if torch.is_tensor(sigma) else float(sigma)
    if not (0.0 < value <= sigma_max) or not math.isfinite(value):
        raise ParameterRangeError(f"sigma={value} outside (0, {sigma_max}]")
    return value


def gaussian_psf_blur(image: torch.Tensor, sigma, sigma_max: float) -> torch.Tensor:
    """Separable Gaussian defocus of std ``sigma`` pixels.

    The window half-width is fixed at ``ceil(3 * sigma_max)`` regardless of
    ``sigma`` so the result is a smooth function of ``sigma``. ``sigma`` may be
    a tensor that requires grad.
    """
    check_sigma(sigma, sigma_max)
    radius = blur_radius(sigma_max)
    h, w = image.shape[-2:]
    mh = blur_matrix(h, sigma, radius, dtype=image.dtype)
    mw = mh if w == h else blur_matrix(w, sigma, radius, dtype=image.dtype)
    return mh @ image @ mw.transpose(0, 1)


def check_image(image: torch.Tensor) -> None:
    if image.dim() not in (3, 4):
        raise ContractError(f"image must be (C, H, W) or (B, C, H, W), got {tuple(image.shape)}")
    c, h, w = image.shape[-3:]
    if c not in (1, 3):
        raise ContractError(f"image must have 1 or 3 channels, got {c}")
    if h < MIN_EXTENT or w < MIN_EXTENT:
        raise ContractError(f"image extent {h}x{w} below minimum {MIN_EXTENT}")


def read_png(path) -> torch.Tensor:
    """Read an 8-bit grey or RGB PNG into a float32 ``(C, H, W)`` tensor in [0, 1]."""
    path = os.fspath(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            fmt, mode = im.format, im.mode
            if fmt != "PNG":
                raise ImageFormatError(f"{path}: not a PNG (format={fmt})")
            if mode.startswith("I") or mode == "F":
                raise ImageFormatError(f"{path}: only 8-bit PNG is supported (mode={mode})")
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode not in ("L", "RGB"):
                raise ImageFormatError(f"{path}: unsupported PNG mode {mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{path}: no such file") from exc
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"{path}: malformed PNG ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    image = torch.from_numpy(arr.astype(np.float32) / 255.0)
    check_image(image)
    return image


def to_uint8(image) -> np.ndarray:
    """Round-to-nearest 8-bit ``(H, W)`` or ``(H, W, 3)`` array."""
    if torch.is_tensor(image):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image) -> None:
    path = os.fspath(path)
    if torch.is_tensor(image):
        check_image(image)
    parent = os.path.dirname(path) or "."
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"{path}: parent directory does not exist")
    try:
        PILImage.fromarray(to_uint8(image)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"{path}: cannot write PNG ({exc})") from exc


def image_io(path, mode: str = "read", image=None):
    """Dispatch to :func:`read_png` / :func:`write_png`."""
    if mode == "read":
        return read_png(path)
    if mode == "write":
        if image is None:
            raise ContractError("write mode needs an image")
        write_png(path, image)
        return None
    raise ValueError(f"unknown mode {mode!r}")
