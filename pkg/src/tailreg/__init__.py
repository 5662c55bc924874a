"""tailreg: a desk-scale lab for regression bias in long-tailed detection.

Synthesizes long-tailed box-regression benchmarks, trains class-specific /
class-agnostic / blended / clustered / merged regression heads, and measures
whether sharing flattens per-class regression loss and lifts rare-class AP.
"""

from .geometry import Box, Delta, decode_delta, encode_delta, iou, nms
from .dataset import (DatasetConfig, FrequencyPartition, Instance, SyntheticDataset,
                      class_scale_report, generate, load_dataset, partition_by_frequency,
                      preset_config, save_dataset)
from .heads import (ClusterConfig, HeadBank, HeadSpec, cluster_heads, classify,
                    effective_weight, load_bank, merge_heads, parse_head_spec, predict,
                    save_bank)
from .training import TrainConfig, TrainLedger, bias_ratio, grad_head, smooth_l1, train
from .evaluation import (Detection, EvalConfig, EvalReport, average_precision, report,
                         run_inference)

__version__ = "0.1.0"
