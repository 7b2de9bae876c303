"""Test-time normalization with mixed global and local statistics.

MixNorm and MixNormBN layers, the ablation variants, an entropy-minimization
baseline, a small numpy conv net with hand-written backprop, and a synthetic
corruption benchmark with an evaluation harness.
"""
from .exceptions import NumericError, UsageError
from .norm import (AffineParams, ChannelStats, MixNormBNConfig, MixNormConfig, MixNormState,
                   TestTimeNorm, adaptive_tau, batch_stats, ema_update, init_from_pretrained,
                   local_stats, mix_stats, mixnorm_forward, mixnormbn_forward, normalize,
                   normalize_variant, sample_stats)
from .model import (NetSpec, Network, OptimizerConfig, entropy_loss, grad_affine, load_network,
                    optimizer_step, save_network, train_source)
from .bench import (CORRUPTIONS, CorruptionSpec, LabeledDataset, StreamMode, apply_corruption,
                    build_stream, generate_source_dataset)
from .harness import METHODS, Method, OnlineAdapter, ProtocolConfig, RunResult, run_adaptation, sweep
from .estimator import SourceClassifier, TestTimeAdapter

__version__ = "0.1.0"
