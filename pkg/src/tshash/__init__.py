"""Teacher-student semi-supervised hashing laboratory.

An MLP encoder maps feature vectors to real embeddings whose signs are
binary codes.  A student network trains on pairwise losses over a small
labeled set plus teacher-consistency terms over unlabeled data; the
teacher follows the student by exponential moving average.  Retrieval
runs on bit-packed codes with popcount Hamming ranking.
"""

from .data import Dataset, TrainingView, generate_blobs, import_csv, load_dataset, save_dataset, split
from .encoder import (
    EncoderParams,
    OptimizerState,
    backward,
    ema_update,
    encode,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_step,
)
from .losses import (
    BatchPairState,
    Hyperparams,
    PairSupervision,
    build_pair_state,
    consistency_loss,
    pseudo_similarity,
    quantization_penalty,
    quantized_pair_loss,
    sim_matrix,
    sim_relaxed,
    supervised_loss_relaxed,
    supervised_pair_loss,
    threshold_select,
    total_loss,
)
from .retrieval import (
    CodeSet,
    MetricsReport,
    average_precision,
    evaluate,
    hamming,
    hamming_distances,
    load_codes,
    pack_codes,
    rank_database,
    save_codes,
    unpack_codes,
)
from .trainer import TrainConfig, TrainLog, TrainingDiverged, perturb, rampup_weight, sample_minibatch, train

__version__ = "0.1.0"
