"""Small encoder-decoder generator, multi-scale patch discriminator and LSGAN losses."""
from __future__ import annotations

import hashlib
import io
import os
import tempfile
from typing import Callable, Dict, List, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError

MIN_GENERATOR_EXTENT = 32
CHECKPOINT_VERSION = 1


def init_weights(module: nn.Module, std: float = 0.02, generator: Optional[torch.Generator] = None) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1), nn.InstanceNorm2d(ch, affine=True), nn.ReLU(True),
            nn.Conv2d(ch, ch, 3, 1, 1), nn.InstanceNorm2d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder (two stride-2 convs) -> residual bottleneck -> decoder -> sigmoid.

    With ``input_skip`` the decoder predicts a residual in logit space on top of
    the input, so a fresh network is close to the identity map.
    """

    def __init__(self, channels: int = 3, ngf: int = 16, n_res: int = 2, input_skip: bool = True):
        super().__init__()
        self.input_skip = input_skip
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, ngf, 7, 1, 3), nn.InstanceNorm2d(ngf, affine=True), nn.ReLU(True),
            nn.Conv2d(ngf, 2 * ngf, 4, 2, 1), nn.InstanceNorm2d(2 * ngf, affine=True), nn.ReLU(True),
            nn.Conv2d(2 * ngf, 4 * ngf, 4, 2, 1), nn.InstanceNorm2d(4 * ngf, affine=True), nn.ReLU(True),
        )
        self.bottleneck = nn.Sequential(*[ResBlock(4 * ngf) for _ in range(n_res)])
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * ngf, 2 * ngf, 3, 1, 1), nn.InstanceNorm2d(2 * ngf, affine=True), nn.ReLU(True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * ngf, ngf, 3, 1, 1), nn.InstanceNorm2d(ngf, affine=True), nn.ReLU(True),
            nn.Conv2d(ngf, channels, 7, 1, 3),
        )

    def forward(self, x):
        h, w = x.shape[-2:]
        if h < MIN_GENERATOR_EXTENT or w < MIN_GENERATOR_EXTENT:
            raise ContractError(f"generator input {h}x{w} below minimum {MIN_GENERATOR_EXTENT}")
        if h % 4 or w % 4:
            raise ContractError(f"generator input {h}x{w} must be divisible by 4")
        out = self.decoder(self.bottleneck(self.encoder(x)))
        if self.input_skip:
            out = out + torch.logit(x.clamp(1e-3, 1 - 1e-3))
        return torch.sigmoid(out)


def generator_forward(G: Generator, x: torch.Tensor) -> torch.Tensor:
    squeeze = x.dim() == 3
    y = G(x.unsqueeze(0) if squeeze else x)
    return y.squeeze(0) if squeeze else y


class PatchDiscriminator(nn.Module):
    """Fully-convolutional LSGAN critic; every conv+activation is a named layer."""

    def __init__(self, channels: int = 3, ndf: int = 32, n_layers: int = 3):
        super().__init__()
        layers = []
        c_in, c_out = channels, ndf
        for i in range(n_layers):
            stride = 2 if i < n_layers - 1 else 1
            layers.append(nn.Sequential(nn.Conv2d(c_in, c_out, 4 if stride == 2 else 3, stride, 1), nn.LeakyReLU(0.2, True)))
            c_in, c_out = c_out, min(c_out * 2, ndf * 8)
        self.layers = nn.ModuleList(layers)
        self.head = nn.Conv2d(c_in, 1, 3, 1, 1)

    def forward(self, x, activations: Optional[list] = None):
        for layer in self.layers:
            x = layer(x)
            if activations is not None:
                activations.append(x)
        return self.head(x)


class Discriminator(nn.Module):
    """Two-or-more-scale patch discriminator returning one score map per scale.

    Scale ``s`` sees the input average-pooled ``2**s`` times. Layer ids are
    ``"s{scale}.l{index}"``.
    """

    def __init__(self, channels: int = 3, ndf: int = 32, n_layers: int = 3, n_scales: int = 2):
        super().__init__()
        if n_scales < 2:
            raise ContractError("need at least two discriminator scales")
        self.scales = nn.ModuleList([PatchDiscriminator(channels, ndf, n_layers) for _ in range(n_scales)])
        self._layer_ids = [f"s{s}.l{i}" for s in range(n_scales) for i in range(n_layers)]

    @property
    def layer_ids(self) -> List[str]:
        return list(self._layer_ids)

    def forward(self, x, capture: bool = False):
        scores, acts = [], {}
        for s, net in enumerate(self.scales):
            xs = x if s == 0 else F.avg_pool2d(x, 2 ** s)
            buf = [] if capture else None
            scores.append(net(xs, buf))
            if capture:
                for i, a in enumerate(buf):
                    acts[f"s{s}.l{i}"] = a
        return (scores, acts) if capture else scores


ScoreFn = Callable[[torch.Tensor], Union[torch.Tensor, List[torch.Tensor]]]


def _as_list(out) -> List[torch.Tensor]:
    return list(out) if isinstance(out, (list, tuple)) else [out]


def lsgan_mean(out, target: float) -> torch.Tensor:
    """Mean of ``(D - target)^2`` over pixels and batch, then over scales."""
    maps = _as_list(out)
    return torch.stack([((m - target) ** 2).mean() for m in maps]).mean()


def loss_gen(D: ScoreFn, y_d: torch.Tensor) -> torch.Tensor:
    return lsgan_mean(D(y_d), 1.0)


def loss_disc(D: ScoreFn, y_d: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return lsgan_mean(D(y_d), 0.0) + lsgan_mean(D(y), 1.0)


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_networks(net_cfg: Optional[dict] = None, seed: int = 0, channels: int = 3):
    net_cfg = dict(net_cfg or {})
    g = torch.Generator().manual_seed(seed)
    G = Generator(channels, ngf=net_cfg.get("ngf", 16), n_res=net_cfg.get("n_res", 2),
                  input_skip=net_cfg.get("input_skip", True))
    D = Discriminator(channels, ndf=net_cfg.get("ndf", 32), n_layers=net_cfg.get("d_layers", 3),
                      n_scales=net_cfg.get("d_scales", 2))
    init_weights(G, generator=g)
    init_weights(D, generator=g)
    for m in list(G.modules()) + list(D.modules()):
        if isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    return G, D


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, *, stage: int, config_hash: str, net_cfg: dict, G=None, D=None,
                    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None, extra: Optional[dict] = None):
    """Write atomically (temp file in the same directory, then rename)."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "stage": int(stage),
        "config_hash": config_hash,
        "net_cfg": dict(net_cfg),
        "generator": G.state_dict() if G is not None else None,
        "discriminator": D.state_dict() if D is not None else None,
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "extra": extra or {},
    }
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            buf = io.BytesIO()
            torch.save(payload, buf)
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, channels: int = 3):
    """Return ``(payload, G, D)``; networks are rebuilt from the stored ``net_cfg``."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ConfigError(f"{path}: checkpoint not found")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    G, D = build_networks(payload["net_cfg"], channels=channels)
    if payload["generator"] is not None:
        G.load_state_dict(payload["generator"])
    else:
        G = None
    if payload["discriminator"] is not None:
        D.load_state_dict(payload["discriminator"])
    else:
        D = None
    return payload, G, D
