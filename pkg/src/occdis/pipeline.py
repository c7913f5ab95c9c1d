"""Three-stage protocol: entangled baseline, physics + guidance estimation, disentangled training.

Stage 1 trains a plain LSGAN translator and keeps its discriminator.
Stage 2 freezes that discriminator to regress ``sigma`` and compute guidance.
Stage 3 trains fresh networks, compositing occluders on ``G(x)`` (only where
the guidance allows) before the discriminator sees it.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConfigError, TrainingDiverged
from .estimation import EstimationConfig, EstimationTrace, estimate_parameters
from .guidance import GuidanceMap, compute_dg, injection_mask, load_dg, save_dg
from .networks import build_networks, loss_disc, loss_gen, save_checkpoint
from .occlusions import (
    OcclusionConfig,
    PhysicalParams,
    composite,
    dilate,
    field_from_config,
    injection_reach,
    render,
)

log = logging.getLogger(__name__)


@dataclass
class StageConfig:
    stage: int = 1
    iterations: int = 2000
    batch: int = 8
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    betas: tuple = (0.5, 0.999)
    beta: float = 0.75
    seed: int = 0
    log_every: int = 100
    check_every: int = 50  # how often stage 3 verifies injection stays inside the mask
    net: dict = field(default_factory=lambda: {"ngf": 16, "ndf": 32, "n_res": 2, "d_layers": 3})
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# config file


_OCC_KEYS = {f.name for f in fields(OcclusionConfig)}
_STAGE_KEYS = {f.name for f in fields(StageConfig)} - {"occlusion", "net"}
_EST_KEYS = {f.name for f in fields(EstimationConfig)}


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path) -> dict:
    """Parse the INI-style run configuration.

    Sections: ``[occlusion]``, ``[network]``, ``[stage1]``, ``[estimation]``,
    ``[guidance]``, ``[stage3]``, ``[data]``. Values are JSON literals where
    they parse as such (numbers, lists, booleans) and plain strings otherwise.
    """
    parser = configparser.ConfigParser()
    if not parser.read(os.fspath(path)):
        raise ConfigError(f"{path}: cannot read config")
    raw = {s: {k: _coerce(v) for k, v in parser.items(s)} for s in parser.sections()}
    unknown_occ = set(raw.get("occlusion", {})) - _OCC_KEYS
    if unknown_occ:
        raise ConfigError(f"unknown [occlusion] keys: {sorted(unknown_occ)}")
    for sec in ("stage1", "stage3"):
        bad = set(raw.get(sec, {})) - _STAGE_KEYS
        if bad:
            raise ConfigError(f"unknown [{sec}] keys: {sorted(bad)}")
    bad = set(raw.get("estimation", {})) - _EST_KEYS
    if bad:
        raise ConfigError(f"unknown [estimation] keys: {sorted(bad)}")
    return raw


def occlusion_from(raw: dict) -> OcclusionConfig:
    return OcclusionConfig(**raw.get("occlusion", {}))


def stage_from(raw: dict, stage: int) -> StageConfig:
    sec = dict(raw.get(f"stage{stage}", {}))
    if "betas" in sec:
        sec["betas"] = tuple(sec["betas"])
    net = {"ngf": 16, "ndf": 32, "n_res": 2, "d_layers": 3}
    net.update(raw.get("network", {}))
    return StageConfig(stage=stage, net=net, occlusion=occlusion_from(raw), **sec)


def estimation_from(raw: dict) -> EstimationConfig:
    return EstimationConfig(**raw.get("estimation", {}))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    G: torch.nn.Module
    D: torch.nn.Module
    records: list  # one dict per logged iteration
    config_hash: str


class Injector:
    """Composites occluders on generated images, restricted to an allowed mask."""

    def __init__(self, occlusion: OcclusionConfig, sigma: Optional[float], mask: Optional[np.ndarray], overlay=None):
        self.occlusion = occlusion
        self.sigma = sigma
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        self.overlay = overlay
        reach = injection_reach(occlusion)
        self.allowed_reach = None if self.mask is None else dilate(self.mask, reach)

    @property
    def active(self) -> bool:
        return self.mask is None or bool(self.mask.any())

    def __call__(self, fake: torch.Tensor, rng: np.random.Generator, check: bool = False) -> torch.Tensor:
        if not self.active:
            return fake
        params = PhysicalParams(self.occlusion.kind, self.sigma if self.sigma is not None else 1.0)
        extent = tuple(fake.shape[-2:])
        out = []
        for x in fake:
            seed = int(rng.integers(2**31))
            translation = (0, 0)
            if self.occlusion.kind == "overlay":
                translation = tuple(int(t) for t in rng.integers(-extent[1] // 4, extent[1] // 4 + 1, 2))
            fld = field_from_config(seed, extent, self.occlusion, self.mask)
            r = render(x, fld, params, self.occlusion, overlay=self.overlay, translation=translation)
            if check and self.allowed_reach is not None and self.occlusion.kind != "overlay":
                outside = ~torch.from_numpy(self.allowed_reach)
                if not bool((r.alpha[..., outside] == 1).all()):
                    raise AssertionError("occluder rendered outside the allowed injection region")
            out.append(composite(x, r))
        return torch.stack(out)


def _sample(rng, data: torch.Tensor, batch: int) -> torch.Tensor:
    return data[rng.integers(0, data.shape[0], batch)]


def train_gan(
    cfg: StageConfig,
    source: torch.Tensor,
    target: torch.Tensor,
    injector: Optional[Injector] = None,
    checkpoint_path=None,
    log_path=None,
    extra: Optional[dict] = None,
    on_log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Alternating LSGAN updates: one generator step then one discriminator step.

    The discriminator trains on the same (possibly occluded) fake batch the
    generator was scored on, detached, versus an unmodified real batch.
    """
    torch.manual_seed(cfg.seed)
    G, D = build_networks(cfg.net, seed=cfg.seed, channels=source.shape[1])
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_g, betas=tuple(cfg.betas))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_d, betas=tuple(cfg.betas))
    rng = np.random.default_rng(cfg.seed)
    inj_rng = np.random.default_rng([cfg.seed, 1])
    chash = config_hash(cfg.to_dict())
    records = []
    log_fh = open(log_path, "w") if log_path else None

    def snapshot():
        if checkpoint_path:
            save_checkpoint(checkpoint_path, stage=cfg.stage, config_hash=chash, net_cfg=cfg.net, G=G, D=D,
                            optimizers={"g": opt_g, "d": opt_d}, extra=extra)

    try:
        acc_g = acc_d = 0.0
        count = 0
        for it in range(1, cfg.iterations + 1):
            x = _sample(rng, source, cfg.batch)
            y = _sample(rng, target, cfg.batch)
            fake = G(x)
            if injector is not None:
                check = cfg.check_every > 0 and it % cfg.check_every == 1
                y_d = injector(fake, inj_rng, check=check)
            else:
                y_d = fake
            lg = loss_gen(D, y_d)
            if not torch.isfinite(lg):
                snapshot()
                raise TrainingDiverged(f"generator loss non-finite at iteration {it}", trace=records,
                                       checkpoint=checkpoint_path)
            opt_g.zero_grad()
            lg.backward()
            opt_g.step()

            ld = loss_disc(D, y_d.detach(), y)
            if not torch.isfinite(ld):
                snapshot()
                raise TrainingDiverged(f"discriminator loss non-finite at iteration {it}", trace=records,
                                       checkpoint=checkpoint_path)
            opt_d.zero_grad()
            ld.backward()
            opt_d.step()

            acc_g += lg.item()
            acc_d += ld.item()
            count += 1
            if it % cfg.log_every == 0 or it == cfg.iterations:
                rec = {"stage": cfg.stage, "iter": it, "loss_g": acc_g / count, "loss_d": acc_d / count}
                records.append(rec)
                if log_fh:
                    log_fh.write(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()) + "\n")
                    log_fh.flush()
                if on_log:
                    on_log(rec)
                log.info("stage %d iter %d loss_g %.4f loss_d %.4f", cfg.stage, it, rec["loss_g"], rec["loss_d"])
                acc_g = acc_d = 0.0
                count = 0
    finally:
        if log_fh:
            log_fh.close()
    snapshot()
    return TrainResult(G=G, D=D, records=records, config_hash=chash)


def stage1_train_baseline(cfg: StageConfig, source, target, checkpoint_path=None, log_path=None) -> TrainResult:
    """Entangled baseline: no occlusion injection."""
    if cfg.stage != 1:
        cfg = StageConfig(**{**cfg.__dict__, "stage": 1})
    return train_gan(cfg, source, target, None, checkpoint_path, log_path)


@dataclass
class Stage2Result:
    trace: Optional[EstimationTrace]
    sigma: Optional[float]
    guidance: GuidanceMap


def stage2_estimate(D_ent, source, occlusion: OcclusionConfig, est_cfg: EstimationConfig,
                    params_path=None, dg_path=None, preview_path=None, guidance_set=None) -> Stage2Result:
    """Regress ``sigma`` (if the occlusion kind has one) and the guidance map from the frozen discriminator."""
    trace = None
    sigma = None
    if occlusion.kind in ("drop", "refract", "dirt"):
        trace = estimate_parameters(D_ent, source, occlusion, est_cfg)
        sigma = trace.sigma
    dg = compute_dg(D_ent, source if guidance_set is None else guidance_set)
    if params_path:
        write_params(params_path, occlusion.kind, sigma, config_hash(asdict(est_cfg)))
    if dg_path:
        save_dg(dg_path, dg, preview_path)
    return Stage2Result(trace=trace, sigma=sigma, guidance=dg)


def write_params(path, kind: str, sigma: Optional[float], chash: str) -> None:
    with open(os.fspath(path), "w") as fh:
        json.dump({"kind": kind, "sigma": sigma, "config_hash": chash}, fh, indent=2)
        fh.write("\n")


def read_params(path) -> dict:
    if not os.path.exists(os.fspath(path)):
        raise ConfigError(f"{path}: parameter file from stage 2 not found")
    with open(os.fspath(path)) as fh:
        data = json.load(fh)
    if "kind" not in data or "sigma" not in data:
        raise ConfigError(f"{path}: parameter file lacks kind/sigma")
    return data


def stage3_train_disentangled(cfg: StageConfig, source, target, sigma: Optional[float], dg,
                              checkpoint_path=None, log_path=None, overlay=None) -> TrainResult:
    """Fresh networks; occluders rendered with the regressed ``sigma`` on ``G(x)`` where ``DG < beta``."""
    if dg is None:
        raise ConfigError("stage 3 needs the guidance map from stage 2")
    if cfg.occlusion.kind in ("drop", "refract", "dirt") and sigma is None:
        raise ConfigError(f"stage 3 with {cfg.occlusion.kind!r} occlusions needs a regressed sigma")
    if cfg.stage != 3:
        cfg = StageConfig(**{**cfg.__dict__, "stage": 3})
    mask = injection_mask(dg, cfg.beta).mask.cpu().numpy()
    if mask.shape != tuple(source.shape[-2:]):
        raise ConfigError(f"guidance extent {mask.shape} != image extent {tuple(source.shape[-2:])}")
    injector = Injector(cfg.occlusion, sigma, mask, overlay=overlay)
    return train_gan(cfg, source, target, injector, checkpoint_path, log_path,
                     extra={"sigma": sigma, "beta": cfg.beta})


def load_stage2_artifacts(params_path, dg_path):
    if not params_path or not dg_path:
        raise ConfigError("stage 3 requires --params and --guidance from stage 2")
    if not os.path.exists(os.fspath(dg_path)):
        raise ConfigError(f"{dg_path}: guidance map from stage 2 not found")
    return read_params(params_path), load_dg(dg_path)


@torch.no_grad()
def translate(G, images: torch.Tensor, batch: int = 32) -> torch.Tensor:
    G.eval()
    out = [G(images[i : i + batch]) for i in range(0, images.shape[0], batch)]
    G.train()
    return torch.cat(out)
