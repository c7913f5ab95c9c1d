"""Evaluation metrics: FID, IS / CIS, perceptual distance, SSIM and PSNR.

Feature extractors are pluggable. Two ship here: a frozen random-weight conv
net (no training, fully deterministic) and a small classifier that can be
fitted to dataset labels and also supplies class probabilities for IS/CIS.
Every report records which extractor produced it.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError

FID_EPS = 1e-6
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


# ---------------------------------------------------------------------------
# feature extractors


class RandomConvFeatures(nn.Module):
    """Frozen random conv stack; image features are per-layer channel means and stds.

    ``spatial(x)`` returns the unit-normalised per-layer maps used for the
    perceptual distance.
    """

    def __init__(self, channels: int = 3, widths: Sequence[int] = (16, 32, 64), seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, c_in = [], channels
        for i, c_out in enumerate(widths):
            conv = nn.Conv2d(c_in, c_out, 3, 2 if i else 1, 1)
            with torch.no_grad():
                conv.weight.normal_(0.0, math.sqrt(2.0 / (c_in * 9)), generator=g)
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.provenance = f"randconv-{'-'.join(map(str, widths))}-seed{seed}"
        self.dim = 2 * sum(widths)

    def spatial(self, x: torch.Tensor) -> List[torch.Tensor]:
        maps = []
        h = x * 2.0 - 1.0
        for conv in self.layers:
            h = F.relu(conv(h))
            maps.append(h)
        return maps

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = []
        for m in self.spatial(x):
            feats.append(m.mean(dim=(2, 3)))
            feats.append(m.std(dim=(2, 3)))
        return torch.cat(feats, 1)


class SmallClassifier(nn.Module):
    """Compact CNN classifier standing in for a finetuned Inception network."""

    def __init__(self, n_classes: int, channels: int = 3, width: int = 16, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.body = nn.Sequential(
            nn.Conv2d(channels, width, 3, 1, 1), nn.ReLU(True), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, 1, 1), nn.ReLU(True), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 4 * width, 3, 1, 1), nn.ReLU(True),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(4 * width, n_classes)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                with torch.no_grad():
                    m.weight.normal_(0.0, math.sqrt(2.0 / m.weight[0].numel()), generator=g)
                    m.bias.zero_()
        self.n_classes = n_classes
        self.provenance = f"smallcls-{n_classes}c-w{width}-seed{seed}-untrained"

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.body(x))

    @torch.no_grad()
    def probs(self, x: torch.Tensor, batch: int = 64) -> np.ndarray:
        self.eval()
        out = [F.softmax(self(x[i : i + batch]), 1) for i in range(0, x.shape[0], batch)]
        return torch.cat(out).double().numpy()

    def fit(self, images: torch.Tensor, labels: torch.Tensor, epochs: int = 10, lr: float = 2e-3, seed: int = 0):
        """Cross-entropy training; updates the provenance tag with a digest of the data."""
        rng = np.random.default_rng(seed)
        opt = torch.optim.Adam(self.parameters(), lr=lr)
        n = images.shape[0]
        self.train()
        for _ in range(epochs):
            order = rng.permutation(n)
            for i in range(0, n, 32):
                idx = order[i : i + 32]
                loss = F.cross_entropy(self(images[idx]), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.eval()
        digest = hashlib.sha256(images.numpy().tobytes() + labels.numpy().tobytes()).hexdigest()[:8]
        self.provenance = self.provenance.replace("untrained", f"fit{digest}-e{epochs}")
        return self


class ClassifierFeatures:
    """Adapter exposing a classifier's penultimate activations as an extractor."""

    def __init__(self, classifier: SmallClassifier):
        self.classifier = classifier
        self.provenance = classifier.provenance + "/penultimate"

    @torch.no_grad()
    def __call__(self, x):
        self.classifier.eval()
        return self.classifier.features(x)


def extract(extractor, images: torch.Tensor, batch: int = 64) -> np.ndarray:
    with torch.no_grad():
        out = [extractor(images[i : i + batch]) for i in range(0, images.shape[0], batch)]
    return torch.cat(out).double().numpy()


# ---------------------------------------------------------------------------
# FID


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b, eps: float = FID_EPS) -> float:
    """``|mu_a - mu_b|^2 + tr(A + B - 2 (A^1/2 B A^1/2)^1/2)`` with ``eps * I`` added to both covariances."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    a = np.atleast_2d(cov_a).astype(np.float64) + eps * np.eye(len(mu_a))
    b = np.atleast_2d(cov_b).astype(np.float64) + eps * np.eye(len(mu_b))
    ra = _sqrtm_psd(a)
    cross = np.linalg.eigvalsh(ra @ b @ ra)
    tr_cross = float(np.sqrt(np.clip(cross, 0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(a) + np.trace(b) - 2.0 * tr_cross)
    return max(value, 0.0)


def fid_from_features(fa: np.ndarray, fb: np.ndarray, eps: float = FID_EPS) -> float:
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ContractError("FID needs at least two samples per set")
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False), eps)


def fid(set_a: torch.Tensor, set_b: torch.Tensor, extractor) -> float:
    return fid_from_features(extract(extractor, set_a), extract(extractor, set_b))


# ---------------------------------------------------------------------------
# IS / CIS


def inception_score(probs: np.ndarray) -> float:
    """``exp(E_x KL(p(c|x) || p(c)))``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ContractError("inception_score needs an (N, K) probability array")
    marginal = p.mean(0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(1).mean()))


def conditional_inception_score(groups: Sequence[np.ndarray]) -> float:
    """IS within each source's translation set, averaged over sources."""
    scores = []
    for g in groups:
        g = np.asarray(g)
        if g.shape[0] < 2:
            raise ContractError("CIS needs at least two translations per source")
        scores.append(inception_score(g))
    if not scores:
        raise ContractError("CIS needs at least one source")
    return float(np.mean(scores))


def inception_scores(groups: Sequence[np.ndarray]) -> tuple:
    """``(IS over all translations pooled, CIS)`` from per-source probability arrays."""
    pooled = np.concatenate([np.asarray(g) for g in groups])
    return inception_score(pooled), conditional_inception_score(groups)


# ---------------------------------------------------------------------------
# perceptual distance


def _unit(m):
    return m / (m.norm(dim=1, keepdim=True) + 1e-10)


@torch.no_grad()
def perceptual_pair_distance(net: RandomConvFeatures, a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    """Per-pair distance: layer-averaged mean squared difference of channel-normalised maps."""
    da = net.spatial(a)
    db = net.spatial(b)
    per_layer = [((_unit(x) - _unit(y)) ** 2).sum(1).mean(dim=(1, 2)) for x, y in zip(da, db)]
    return torch.stack(per_layer).mean(0).double().numpy()


def perceptual_distance(
    a: torch.Tensor, b: Optional[torch.Tensor] = None, net: Optional[RandomConvFeatures] = None,
    mode: str = "distance", n_pairs: int = 1900, seed: int = 0,
) -> tuple:
    """Return ``(value, pairs_used)``.

    ``distance`` compares aligned ``a[i]`` / ``b[i]``; ``diversity`` averages the
    distance over random distinct pairs drawn from ``a`` alone.
    """
    net = net or RandomConvFeatures()
    if mode == "distance":
        if b is None or a.shape != b.shape:
            raise ContractError("distance mode needs aligned same-shape sets")
        return float(perceptual_pair_distance(net, a, b).mean()), int(a.shape[0])
    if mode != "diversity":
        raise ContractError(f"unknown mode {mode!r}")
    n = a.shape[0]
    if n < 2:
        raise ContractError("diversity needs at least two images")
    all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if n_pairs >= len(all_pairs):
        pairs = all_pairs
    else:
        rng = np.random.default_rng(seed)
        pairs = [all_pairs[k] for k in sorted(rng.choice(len(all_pairs), n_pairs, replace=False))]
    ii = torch.tensor([p[0] for p in pairs])
    jj = torch.tensor([p[1] for p in pairs])
    vals = []
    for s in range(0, len(pairs), 128):
        vals.append(perceptual_pair_distance(net, a[ii[s : s + 128]], a[jj[s : s + 128]]))
    return float(np.concatenate(vals).mean()), len(pairs)


# ---------------------------------------------------------------------------
# SSIM / PSNR


def _ssim_window(dtype):
    t = torch.arange(SSIM_WINDOW, dtype=dtype) - (SSIM_WINDOW - 1) / 2
    g = torch.exp(-(t * t) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03, range 1), averaged over channels."""
    a = a.double()
    b = b.double()
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    n, c, h, w = a.shape
    win = _ssim_window(torch.float64).expand(c, 1, -1, -1)
    filt = lambda x: F.conv2d(x, win, groups=c)
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float((num / den).mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB for data range 1; ``inf`` when the images are identical."""
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_psnr(pairs_a: torch.Tensor, pairs_b: torch.Tensor) -> tuple:
    """Mean SSIM and mean PSNR over aligned pairs (PSNR mean is ``inf`` if any pair is identical)."""
    if pairs_a.shape != pairs_b.shape:
        raise ContractError("ssim_psnr needs aligned same-extent pairs")
    if pairs_a.dim() == 3:
        pairs_a, pairs_b = pairs_a.unsqueeze(0), pairs_b.unsqueeze(0)
    s = [ssim(x, y) for x, y in zip(pairs_a, pairs_b)]
    p = [psnr(x, y) for x, y in zip(pairs_a, pairs_b)]
    return float(np.mean(s)), float(np.mean(p))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    metric: str
    value: float
    set_sizes: list
    extractor: str
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        if isinstance(self.value, float) and math.isinf(self.value):
            d["value"] = "inf"
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(os.fspath(path), "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(os.fspath(path)) as fh:
            d = json.load(fh)
        if d.get("value") == "inf":
            d["value"] = math.inf
        return cls(**d)


def compare_reports(a: MetricReport, b: MetricReport) -> float:
    """``a.value - b.value``; refuses reports of different metrics or extractors."""
    if a.metric != b.metric:
        raise ContractError(f"cannot compare {a.metric} with {b.metric}")
    if a.extractor != b.extractor:
        raise ContractError(f"reports use different extractors: {a.extractor} vs {b.extractor}")
    return a.value - b.value
