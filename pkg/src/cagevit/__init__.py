"""Activation-guided vision transformer: salience-driven token selection,
multi-head fusion of background tokens and gated linear attention, on a
small NumPy autodiff core."""

from .errors import CageError, ContractError, DimensionError, MeasurementError, NumericalError, ParseError, TrainingError
from .tensor import Tensor, backward, no_grad
from .salience import (SalienceBundle, TokenPartition, ingest_bundle, minor_count, patch_scores,
                       select_and_rearrange, weighted_salience, write_bundle)
from .pipeline import FusionParams, assemble, embed, multi_head_fusion, patchify, split_tokens
from .attention import AttentionConfig, GridLayout, gated_linear_sra, linear_sra, mha, sra
from .model import TINY, VARIANTS, VariantConfig, build, count_params, forward, load_checkpoint, save_checkpoint
from .complexity import bench, flops_linear, flops_sra
from .data import SyntheticTask, gen_dataset

__version__ = "0.1.0"
