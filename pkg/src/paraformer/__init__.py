"""Shallow branch-parallel transformers trained by progressive approximation."""

from .attention import (AttnBlockWeights, HeadWeights, closedform_ws, head_attention_matrix,
                        mha_forward, verify_equivalence)
from .data import Dataset, load_cifar_binary, load_idx, synth_clusters
from .layers import BranchWeights, FfnWeights, LayerWeights, branch_forward, ghat_forward, layer_forward
from .lifecycle import compress_keep_prefix, expand_add_branch
from .model import (ModelConfig, ParaFormerModel, branch_features, embed, forward_stage,
                    init_model, predict)
from .parallel import BranchPool, PoolConfig, bench_inference, parallel_predict
from .trainer import (TrainConfig, evaluate_stages, joint_train, milestone_train,
                      progressive_epoch, progressive_train, train)

__version__ = "0.1.0"
