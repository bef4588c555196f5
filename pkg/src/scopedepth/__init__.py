"""Sparse-to-dense depth completion for endoscopy-like scenes.

A coarse depth from an RGB + sparse-depth backbone is iteratively fused
with its gradient field by a ConvGRU, refined at quarter resolution by a
guidance-conditioned deterministic diffusion sampler, then lifted to
full resolution by convex upsampling and spatial propagation.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config, save_config
from .data import (
    DepthMap,
    ManifestDataset,
    Sample,
    SceneConfig,
    SparseDepth,
    denormalize_depth,
    generate_dataset,
    load_depth,
    load_image,
    load_sample,
    normalize_depth,
    save_depth,
    save_image,
    sparsify,
    stable_seed,
    synth_scene,
)
from .diffusion import SamplingDivergence, ddim_step, estimate_x0, predict_noise, sample
from .model import DepthCompletion, build_model, build_model_schedule, predict
from .objectives import (
    DELTA_THRESHOLD,
    MetricReport,
    compute_gt_gradient,
    depth_loss,
    diffusion_loss,
    evaluate,
    gradient_loss,
)
from .refinement import convex_upsample, propagate
from .report import Intrinsics, backproject, save_point_cloud
from .schedule import NoiseSchedule, build_schedule, forward_diffuse
from .train import (
    evaluate_split,
    load_checkpoint,
    predict_sample,
    run_ablation,
    sparsity_sweep,
    train,
)
