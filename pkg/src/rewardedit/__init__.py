"""rewardedit: reward-feedback fine-tuning of a small masked-image generator.

A desk-scale pipeline for generative image editing (inpainting and
outpainting): procedural scene datasets with synthetic quality oracles,
three reward models (aesthetic preference, image-text alignment, per-pixel
coherence), staged feedback fine-tuning with adversarial coupling, and
progressive step reduction for faster sampling.
"""

from .diffusion import (
    NoiseSchedule,
    compose_masked,
    ddim_step,
    forward_diffuse,
    make_schedule,
    predict_x0,
    sample_edit,
)
from .generator import CondUNet, ProbeGenerator
from .masking import MaskPolicy, dilate_instance_mask, sample_mask, sample_training_mask
from .pefl import (
    BaselineTrainer,
    PeflConfig,
    PeflLossBundle,
    PeflTrainer,
    PerceptualExtractor,
    StageSchedule,
    ema_update,
    progressive_phase,
    stage1_latent,
    stage2_rollout,
    stage3_losses,
)
from .rewards import (
    FusionScorer,
    PixelCritic,
    RewardSuite,
    aesthetic_pref_loss,
    alignment_pref_loss,
    coherence_d_loss,
    coherence_score_map,
    score_aesthetic,
)
from .scenes import QualityOracle, SceneAttributes, corrupt_image, render_scene, sample_scene
from .data import (
    AlignTriplet,
    PreferenceTriplet,
    TextEncoder,
    build_aesthetic_triplets,
    build_align_triplets,
    build_train_batch,
    cluster_and_select,
    filter_decorative,
)
from .evaluation import (
    AttributeProbe,
    EvalReport,
    gsb_preference_rates,
    gsb_superiority,
    region_consistency,
    toy_alignment_score,
)

__version__ = "0.1.0"
