"""Motion transfer on a toy video diffusion transformer via attention motion flows."""

from .tensor import Tensor, Tape, ShapeError, finite_diff_check
from .model import (
    ModelConfig,
    DiTModel,
    DiffusionSchedule,
    PositionalEmbedding,
    build_posemb,
    cosine_schedule,
    add_noise,
    ddim_step,
    sample_video,
)
from .flow import (
    CrossFrameAttention,
    DisplacementMap,
    MotionFlow,
    cross_frame_attention,
    hard_displacement,
    soft_displacement,
    extract_reference_amf,
    amf_loss,
    nn_displacement,
)
from .guidance import (
    Adam,
    GuidanceConfig,
    OptimizedStateSet,
    capture_reference_kv,
    guided_generate,
    zero_shot_generate,
)
from .synth import MotionSpec, VideoClip, FlowField, gen_clip, gen_dataset, train_toy_dit
from .evalkit import AgreementReport, displacement_agreement, total_variation

__version__ = "0.1.0"
