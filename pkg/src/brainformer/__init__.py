"""Desk-scale Brainformer: non-uniform transformer blocks built from
attention / dense-FFN / MoE sub-layers, two MoE routing algorithms, and a
budget-constrained evolutionary block search.
"""

from .tensor import Tensor, top_k_indices
from .layers import (
    AttentionConfig, FfnConfig, MoeConfig, RoutingDecision,
    attention_forward, ffn_forward, gate_scores, moe_forward,
    route_top2, route_expert_choice, load_balance_aux_loss,
)
from .model import (
    BlockSpec, ModelSpec, ParamCount, LanguageModel, ConfigError,
    compose_block, stack_n_times, scale_model_dim, count_params,
    glam_baseline_block, brainformer1_like_block,
    save_checkpoint, load_checkpoint, read_genome, write_genome,
)
from .training import (
    TrainConfig, Budget, ByteCorpus, Adafactor,
    lr_at, train_steps, evaluate_perplexity, measure_step_time,
)
from .search import (
    SearchSpace, Candidate, TrialRecord, EvolutionState,
    sample_candidate, mutate, early_stop_check, evolve, finalize_topk,
    SurrogateRunner, ProxyTrainingRunner,
)

__version__ = "0.1.0"
