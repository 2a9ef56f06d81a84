"""Text-conditioned, anatomy-aware 3D CT synthesis on procedural phantoms.

A hierarchical diffusion pipeline: a text-conditioned low-resolution
denoiser jointly generates CT and anatomy-mask channels, a lightweight
super-resolution denoiser upscales 4x, and marginalization over channels
provides anatomy-conditioned synthesis and segmentation-as-generation.
"""

from .conditioning import (
    FixMask,
    concat_channels,
    decode_binary,
    decode_lobe,
    encode_binary,
    encode_lobe,
    marginal_sample,
    segment_via_marginalization,
    split_channels,
)
from .diffusion import (
    DiffusionBatch,
    NoiseSchedule,
    ancestral_sample,
    ancestral_sample_array,
    build_cosine_schedule,
    chain_forward_sample,
    forward_sample,
    make_diffusion_batch,
    posterior_params,
    reconstruction_loss,
)
from .errors import ConfigurationError, ShapeError, ValidationError
from .metrics import (
    FeatureSet,
    PromptPair,
    dice,
    ctr,
    extract_features,
    extract_heart_mask,
    estimate_effusion_volume_l,
    fid,
    laa950,
    mmd,
    prompt_contrast_study,
    train_feature_extractor,
)
from .networks import (
    AttentionCostReport,
    BottleneckAttention,
    DenoiserConfig,
    DenoisingUNet3d,
    attention_cost_report,
    build_lowres_denoiser,
    build_superres_denoiser,
    lowres_denoise,
    superres_denoise,
)
from .phantoms import (
    PhantomRecord,
    PhantomSpec,
    ReportDocument,
    measure_ground_truth,
    sample_dataset,
    synth_phantom,
)
from .pipeline import (
    GenerationResult,
    OptimConfig,
    TrainConfig,
    downsample_nearest_4x,
    denormalize_hu,
    generate,
    normalize_hu,
    train_lowres,
    train_superres,
    upsample_4x,
)
from .storage import read_volume, write_volume
from .text import (
    TextEmbedding,
    TextEncoder,
    TextEncoderConfig,
    TokenSequence,
    Vocabulary,
    build_vocab,
    encode,
    mlm_corrupt,
    pair_swap_batch,
    pretrain,
    tokenize,
    zero_text_embedding,
)
from .volume import CHANNEL_ROLES, JointVolume

__version__ = "0.1.0"
