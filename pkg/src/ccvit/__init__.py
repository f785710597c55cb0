"""Context/concept-grouped vision transformer with masked-context self-distillation."""

from .schema import (ChannelRole, ChannelSpec, GroupSchema, GroupedBatch,
                     OODSharingPlan, SchemaError, build_ood_plan, merge_groups,
                     parse_schema, split_groups)
from .stems import GroupStem, StemConfig, instance_normalize, naive_grouped_stem
from .encoder import (BaselineConfig, BaselineViT, EncoderConfig, EncoderOutput,
                      GroupedEncoder, count_baseline_parameters, count_parameters,
                      load_checkpoint, normalized_shared_depth, save_checkpoint)
from .distill import (ContextDistillationTrainer, DropPolicy, ProjectionHead,
                      TrainConfig, drop_channels, ema_update, group_contrastive_loss,
                      kl_distillation_loss, masked_patch_loss, patch_mask, project,
                      sample_drop_count)
from .synth import SynthConfig, SynthDataset, generate, load_dataset, write_dataset
from .evaluate import (EmbeddingRecord, ProbeResult, RetrievalResult, aggregate,
                       cosine_diagnostic, embed_dataset, linear_probe, retrieval_eval)
from .channel_stats import (ChannelDistribution, TinyConvFeaturizer, analyze_dataset,
                            cluster_and_assign, emit_report, extract_channel_features,
                            parity_entropy)

__version__ = "0.1.0"
