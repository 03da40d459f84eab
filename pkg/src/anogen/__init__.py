"""Few-shot anomaly image generation with guided diffusion."""

__version__ = "0.1.0"

from .diffusion import (ConditionalDenoiser, ContractViolation, DenoiserConfig,
                        HaarCodec, IdentityCodec, MlpDenoiser, NoiseSchedule,
                        UntrainedDenoiserError, ancestral_sample, forward_diffuse,
                        predict_x0, reverse_step, train_denoiser)
from .reweighting import (AdaptiveReweightHook, AttentionWeightMap,
                          DegenerateWeightMapWarning, compute_weight_map,
                          ones_hook, resample_weight_map, save_weight_map_image)
from .embeddings import (AnomalyMask, AnomalyTypeRegistry, SpatialEncoder,
                         SpatialEncoderConfig, TokenEmbedding, TypeEntry,
                         masked_diffusion_loss, train_mask_embedding,
                         train_spatial_anomaly_embeddings)
from .backbone import (BackboneTrainConfig, ClassConditioner, backbone_digest,
                       load_backbone, save_backbone, train_backbone)
from .generation import (AnomalyPair, GenerationRequest, MaskSynthesisError,
                         generate_anomaly, generate_dataset, in_mask_coverage,
                         read_manifest, synthesize_mask)
from .data import (DatasetError, DatasetIndex, load_dataset,
                   make_synthetic_corpus, read_image, read_mask, tree_digest,
                   write_image, write_mask)
from .metrics import (FeatureSpaceDistance, UndefinedMetricError, auroc,
                      average_precision, f1_max, ic_lpips, inception_score, pro)
from .inspection import (InspectionError, Localizer, LocalizerConfig,
                         MetricReport, SmallClassifier, TrainedClassifier,
                         evaluate_localizer, smooth_scores,
                         train_defect_classifier, train_localizer,
                         train_texture_classifier)
from .checkpoint import CheckpointError, file_digest, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, RunConfig
