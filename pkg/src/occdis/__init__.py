"""Occlusion-aware unpaired image translation: physical occluder models injected into GAN training."""

from .errors import (
    ConfigError,
    ContractError,
    FrozenViolationError,
    ImageFormatError,
    ParameterRangeError,
    RegistryError,
    TrainingDiverged,
)
from .imagecore import bilinear_sample, gaussian_psf_blur, image_io, read_png, write_png
from .occlusions import (
    DropField,
    DropSpec,
    OcclusionConfig,
    PhysicalParams,
    composite,
    drop_displacement,
    render,
    render_dirt,
    render_gaussian_ablation,
    render_overlay,
    render_raindrops,
    sample_drop_field,
)
from .networks import Discriminator, Generator, build_networks, generator_forward, loss_disc, loss_gen
from .estimation import EstimationConfig, EstimationTrace, estimate_parameters
from .guidance import GuidanceMap, InjectionMask, compute_dg, gradcam_layer, injection_mask
from .pipeline import StageConfig, stage1_train_baseline, stage2_estimate, stage3_train_disentangled
from .synthetic import SyntheticSpec, StyleTransform, make_synthetic_dataset
from .metrics import fid, inception_scores, perceptual_distance, ssim_psnr

__version__ = "0.1.0"
