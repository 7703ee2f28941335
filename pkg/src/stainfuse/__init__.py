"""Virtual H&E-to-IHC staining toolkit.

A wavelet-pyramid resnet generator with recurrent multi-scale fusion and
cross-attention guidance from contrastively pretrained encoders, trained
with least-squares adversarial and patch-similarity-weighted L1 losses.
"""

from .attention import CrossAttentionFusion
from .config import AblationFlags, GanTrainConfig, TrainConfig, load_config, save_config
from .data import (
    PairedSample,
    SyntheticStainSpec,
    generate_synthetic_dataset,
    load_paired_dataset,
    random_crop_pair,
    random_hflip_pair,
)
from .discriminator import PatchDiscriminator
from .encoders import (
    DualEncoders,
    EncoderTrainConfig,
    ImageEncoder,
    info_nce_loss,
    l2_penalty,
    load_encoders,
    pretrain_dual_encoders,
    save_encoders,
    similarity_threshold_analysis,
    threshold_sweep,
)
from .exceptions import ConfigError, DataError, NumericalError, ShapeError, StainFuseError
from .generator import GeneratorConfig, GeneratorFeatureMaps, StainGenerator, fuse_hidden
from .losses import AdaptiveL1Config, adaptive_l1_loss, gan_losses, total_generator_loss
from .metrics import (
    FixedConvFeatures,
    MetricReport,
    evaluate_pairs,
    fid,
    fid_from_features,
    fid_from_stats,
    psnr,
    ssim,
)
from .multiscale import (
    ConvGRUCell,
    HiddenSequence,
    MultiScaleExtractor,
    MultiScalePyramid,
)
from .train import GanTrainer, infer, run_ablation_suite
from .wavelet import WaveletSubbands, WTConvLayer, haar_dwt2d, haar_idwt2d

__version__ = "0.1.0"
