"""Locally vs globally normalized decoding strategies for token models."""

from . import errors
from .calibrate import CalibrationResult, average_normalizer, match_parameters
from .decoding import (
    AllowedSet,
    DecoderSpec,
    GenerationRecord,
    allowed_set,
    greedy_sequence,
    q_logprob,
    sample_sequence,
    step_distribution,
)
from .distortion import (
    LndRecord,
    QuantileTable,
    distortion_weight,
    lnd_pair_ratio,
    lnd_quantile_table,
)
from .equilibrium import (
    ObjectiveReport,
    decompose_objective,
    kl_objective,
    verify_variational_max,
    zero_temperature_scan,
)
from .globalnorm import (
    PressureResult,
    RejectionStats,
    SequenceDistribution,
    enumerate_global,
    enumerate_local,
    global_argmax,
    rejection_sample_batch,
    rejection_sample_temperature,
    rejection_sample_truncated,
    transfer_pressure,
)
from .models import (
    TokenModel,
    Vocabulary,
    load_model,
    next_distribution,
    save_model,
    sequence_logprob,
    train_ngram,
)
from .qd import QdPoint, exact_qd, mean_nll, qd_sweep, smb_entropy
from .rng import SplitMix64, derive_seed

__version__ = "0.1.0"

DEFAULT_SEED = 20240613
"""Master seed used by the CLI when none is given."""
