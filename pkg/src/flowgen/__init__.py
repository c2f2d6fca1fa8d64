"""Caption-conditioned flow-matching image synthesis on a tape-based autodiff
engine, with a synthetic captioned-fundus data generator, contrastive data
curation, distribution metrics, and a three-stage training pipeline."""

from .tensor import (ComputeGraph, Tensor, backward, grad_check, no_grad,
                     use_graph)
from .optim import Adam, clip_global_norm, global_grad_norm
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import (CrossAttention, EncoderBlock, LayerNorm, Linear, MLP, Module,
                 SelfAttention, attention)
from .text import (CaptionEmbedding, TextEncoder, Vocabulary, all_unknown,
                   tokenize)
from .dit import (ModelConfig, PadSpec, VelocityDiT, assemble_patches, crop_back,
                  dynamic_pad, extract_patches, grid_position_encoding,
                  pad_patch_mask, pad_pixel_mask)
from .flow import (FlowSample, SamplerConfig, TrainState, cfm_loss,
                   guided_velocity, interpolate, sample_ode, train_step)
from .data import (CaptionRecord, DatasetManifest, load_image, resize_image,
                   save_image)
from .phantom import (PhantomParams, build_manifest, caption_from_params,
                      corrupt_captions, disc_centroid_oracle, inject_boilerplate,
                      laterality_oracle, lesion_count_oracle, parse_caption,
                      read_attributes, render_phantom, sample_params,
                      stratified_split_labels)
from .curation import (DualEncoder, FilterReport, calibrate_threshold,
                       contrastive_loss, filter_pairs, refine_caption,
                       retrieval_top1, similarity_score, train_dual_encoder)
from .metrics import (FeatureExtractor, MetricReport, alignment_score,
                      compute_fid, compute_is, compute_kid, extract_features,
                      metric_view, quadratic_weighted_kappa,
                      train_feature_extractor)
from .pipeline import (AblationConfig, CurateConfig, DownstreamConfig,
                       EvalConfig, GenerateConfig, GeneratorBundle, RunLedger,
                       StageConfig, build_generator, contact_sheet,
                       downstream_augment, evaluate, generate, load_generator,
                       locked_dir, run_ablation, sample_images, save_generator,
                       stage1_pretrain, stage2_curate, stage3_finetune)
from .util import ContractError, NonFiniteError, canonical_json, config_hash, spawn_rng

__version__ = "0.1.0"
