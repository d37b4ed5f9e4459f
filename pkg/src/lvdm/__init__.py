"""Latent video diffusion at desk scale.

A causal 3D-convolutional codec maps images and videos into one latent space;
a windowed-attention transformer denoises v-parameterized latents; task
wrappers add frame-prediction conditioning, autoregressive long video, and a
2x super-resolution stage. See README.md for the CLI.
"""

from .codec import (
    Codec,
    CodecConfig,
    LatentStats,
    LatentTensor,
    VideoTensor,
    causal_conv3d,
    denormalize_latents,
    fit_latent_stats,
    normalize_latents,
)
from .patchify import (
    TokenGrid,
    add_position_embeddings,
    interpolate_position_embeddings,
    patchify,
    unpatchify,
)
from .backbone import (
    AdaLnLoraState,
    ConditioningBundle,
    Denoiser,
    DenoiserConfig,
    WindowConfig,
    adaln_params,
    attention,
    cross_attention,
    denoiser_forward,
    param_count,
    spatiotemporal_layer,
    window_partition,
    window_reverse,
)
from .diffusion import (
    NoiseSchedule,
    TrainBatch,
    TrainStepConfig,
    cfg_combine,
    ddim_step,
    eps_from_v,
    make_schedule,
    q_sample,
    sample,
    sample_batch,
    training_step,
    v_target,
    x0_from_v,
)
from .tasks import (
    FramePredMask,
    SuperResStage,
    autoregressive_generate,
    build_fp_conditioning,
    depth_to_space,
    noise_augment,
    space_to_depth,
    superres_sample,
)
from .data import ToyDatasetSpec, generate_toy_dataset
from .training import TrainConfig, train
from .gradcheck import grad_check

__version__ = "0.1.0"
