"""Adversarial regression of occlusion physics against a frozen discriminator.

Clear source images pass through the occlusion model (no generator, i.e. an
identity translator) and the defocus ``sigma`` is descended on the LSGAN
generator loss of the frozen entangled discriminator. Only ``sigma`` moves.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, FrozenViolationError, ParameterRangeError, TrainingDiverged
from .networks import loss_gen, parameter_digest
from .occlusions import OcclusionConfig, PhysicalParams, composite, field_from_config, render

log = logging.getLogger(__name__)

REGRESSABLE = ("drop", "refract", "dirt")


def softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


@dataclass
class EstimationConfig:
    init_sigma: float = 1.0
    steps: int = 150
    step_size: float = 0.5
    batch: int = 16
    seed: int = 0
    optimizer: str = "sgd"  # "sgd" (fixed step) or "adam"
    min_sigma: float = 1e-3

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterRangeError("steps must be >= 1")
        if self.init_sigma <= 0:
            raise ParameterRangeError(f"init_sigma={self.init_sigma} must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EstimationTrace:
    sigmas: List[float] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    kind: str = "drop"

    @property
    def sigma(self) -> float:
        """Final estimate: the sigma reached after the last step."""
        return self.sigmas[-1]

    def __len__(self):
        return len(self.sigmas)


def occlude_batch(images: torch.Tensor, sigma, cfg: OcclusionConfig, seeds, masks=None) -> torch.Tensor:
    """Composite freshly sampled occluders over each image of a batch."""
    extent = tuple(images.shape[-2:])
    params = PhysicalParams(cfg.kind, sigma)
    out = []
    for i, x in enumerate(images):
        fld = field_from_config(int(seeds[i]), extent, cfg, None if masks is None else masks)
        out.append(composite(x, render(x, fld, params, cfg)))
    return torch.stack(out)


def estimate_parameters(
    D_ent,
    source_set: torch.Tensor,
    occlusion: OcclusionConfig,
    cfg: Optional[EstimationConfig] = None,
) -> EstimationTrace:
    """Regress ``sigma`` so occluded source images fool the frozen ``D_ent``.

    Each step draws a batch and fresh occluder placements, renders with the
    current ``sigma = softplus(raw)`` and takes one step on ``raw``.
    """
    cfg = cfg or EstimationConfig()
    if occlusion.kind not in REGRESSABLE:
        raise ContractError(f"occlusion kind {occlusion.kind!r} has no regressable parameters")
    if source_set is None or source_set.shape[0] == 0:
        raise ContractError("source_set must be non-empty")
    if not 0 < cfg.init_sigma <= occlusion.sigma_max:
        raise ParameterRangeError(f"init_sigma={cfg.init_sigma} outside (0, {occlusion.sigma_max}]")

    before = parameter_digest(D_ent)
    grad_flags = [p.requires_grad for p in D_ent.parameters()]
    was_training = D_ent.training
    for p in D_ent.parameters():
        p.requires_grad_(False)
    D_ent.eval()

    raw_hi = softplus_inverse(occlusion.sigma_max)
    raw_lo = softplus_inverse(cfg.min_sigma)
    raw = torch.tensor(softplus_inverse(cfg.init_sigma), dtype=source_set.dtype, requires_grad=True)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam([raw], lr=cfg.step_size)
    else:
        opt = torch.optim.SGD([raw], lr=cfg.step_size)
    rng = np.random.default_rng(cfg.seed)
    trace = EstimationTrace(kind=occlusion.kind)
    n = source_set.shape[0]
    try:
        for step in range(cfg.steps):
            idx = rng.integers(0, n, cfg.batch)
            seeds = rng.integers(0, 2**31, cfg.batch)
            sigma = F.softplus(raw)
            y_p = occlude_batch(source_set[idx], sigma, occlusion, seeds)
            loss = loss_gen(D_ent, y_p)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}", trace=trace)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                raw.clamp_(raw_lo, raw_hi)
            trace.sigmas.append(F.softplus(raw).item())
            trace.losses.append(loss.item())
            if step % 25 == 0:
                log.debug("estimation step %d sigma=%.4f loss=%.5f", step, trace.sigmas[-1], trace.losses[-1])
    finally:
        for p, flag in zip(D_ent.parameters(), grad_flags):
            p.requires_grad_(flag)
        D_ent.train(was_training)
    if parameter_digest(D_ent) != before:
        raise FrozenViolationError("discriminator parameters changed during estimation")
    return trace


def photometric_fit(
    clear: torch.Tensor,
    occluded: torch.Tensor,
    seeds,
    occlusion: OcclusionConfig,
    init_sigma: float = 10.0,
    steps: int = 200,
    lr: float = 0.5,
) -> float:
    """Fit ``sigma`` by L2 on paired data whose occluder placements (``seeds``) are known.

    Uses Adam on the softplus parameter; returns the final ``sigma``.
    """
    raw = torch.tensor(softplus_inverse(init_sigma), dtype=clear.dtype, requires_grad=True)
    opt = torch.optim.Adam([raw], lr=lr)
    hi = softplus_inverse(occlusion.sigma_max)
    for _ in range(steps):
        pred = occlude_batch(clear, F.softplus(raw), occlusion, seeds)
        loss = ((pred - occluded) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            raw.clamp_(max=hi)
    return F.softplus(raw).item()


def photometric_grid(clear, occluded, seeds, occlusion: OcclusionConfig, grid) -> tuple:
    """L2 between paired renders at each grid sigma; returns ``(best_sigma, losses)``."""
    losses = []
    with torch.no_grad():
        for s in grid:
            pred = occlude_batch(clear, float(s), occlusion, seeds)
            losses.append(float(((pred - occluded) ** 2).mean()))
    return float(grid[int(np.argmin(losses))]), losses
