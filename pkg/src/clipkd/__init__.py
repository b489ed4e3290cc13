"""Desk-scale dual-encoder contrastive distillation toolkit."""

from .batch import EmbeddingBatch
from .encoders import (ClipModel, MaskSpec, ModelConfig, TowerConfig,
                       encode_image, encode_text, fuse_embeddings, init_model,
                       project_student, sample_mask, student_config,
                       teacher_config)
from .errors import (ClipKdError, ConfigError, FormatError, InputError,
                     TrainingDiverged)
from .grads import (GradField, GradReport, backprop_model, clip_grad_analytic,
                    finite_diff_grad, grad_check_report)
from .losses import (ContrastiveDistribution, KdWeights, LossBreakdown,
                     MiToyJoint, afd_loss, clip_loss, combined_loss,
                     contrastive_distribution, crd_loss, fd_loss, gd_loss,
                     icl_loss, mfd_loss, mi_bound_check)
from .numcore import (RngStream, center_columns, l2_normalize_rows, matmul,
                      softmax_rows)

__version__ = "0.1.0"
