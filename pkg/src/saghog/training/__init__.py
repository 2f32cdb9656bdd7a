"""Pretraining, pseudo-labels, finetuning and batch sampling."""

from .cluster import KMeansResult, PseudoLabels, cluster_pseudolabels, kmeans, ratio_test
from .data import PageRef, compute_targets, extract_patches
from .finetune import EarlyStopping, EvalPages, FinetuneResult, encode_patches, finetune, page_descriptors, validation_map
from .losses import mae_loss, ms_loss
from .pretrain import NonFiniteLoss, PretrainResult, Pretrainer, epoch_patches, make_optimizer, pretrain, pretrain_patches
from .sampler import pk_sampler
