"""Rank-r CP multi-token prediction heads with self-speculative decoding."""

from .cp_distribution import (CPJointDist, condition_on, first_token_marginal, from_logits,
                              log_prob, marginal, materialize)
from .heads import CPModel, FullHeadParams, ReducedHeadParams, base_next_token_dist
from .encoder import EncoderParams
from .sampler import SampleConfig, build_draft_tree, greedy_sequence, sample_sequence
from .speculative import SpecDecodeStats, generate
from .training import TrainConfig, train

__version__ = "0.1.0"
