"""Selective-forgetting reinitialization for anytime learning on mega-batch streams."""

from .datastream import (
    BufferedReplay,
    Dataset,
    FullReplay,
    MegaBatchStream,
    NoReplay,
    ReplayBuffer,
    assemble_training_set,
    cap_per_class,
    corrupt_labels,
    load_csv,
    load_idx,
    make_stream,
    sample_subset,
    synth_blobs,
    update_buffer,
)
from .engine import Network, NetworkSpec, OptimizerConfig, init_uniform, loss_ce, lr_at, sgd_step
from .errors import (
    ConfigurationError,
    DivergenceError,
    InputError,
    LureError,
    ParseError,
    ProtocolError,
)
from .reinit import ColdStart, Llf, Lure, Rifle, ShrinkPerturb, WarmStart
from .saliency import SensitivityMask, normalize_saliency, snip_sensitivity, topk_mask
from .trainer import ExperimentResult, TrainConfig, evaluate, run_alma, seed_streams, train_megabatch

__version__ = "0.1.0"
