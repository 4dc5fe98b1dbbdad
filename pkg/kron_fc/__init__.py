from .accounting import chinese_table, mnist_table, svhn_table
from .formats import (
    Dataset,
    ReportRow,
    emit_report,
    load_checkpoint,
    load_mnist,
    parse_config,
    parse_idx,
    save_checkpoint,
    to_patches,
    write_idx,
)
from .kfc import (
    FactorShape,
    KfcGroup,
    KfcSpec,
    KfcWeights,
    backward,
    count_macs,
    count_params,
    forward,
    init_weights,
    make_spec_combined,
    make_spec_formulation,
    make_spec_general,
    make_spec_kfcm,
    materialize,
    nearest_divisor,
    pad_dims,
)
from .linalg import (
    Rng,
    kron,
    mac_counter,
    matmul,
    rearrange,
    svd_full,
    svd_truncated,
    unvec,
    vec,
)
from .nkp import compress_fc, compress_fc_first_group, lowrank_init, nkp
from .presets import PRESETS, build_model
from .train import Model, OptimState, TrainConfig, adam_step, evaluate, sgd_step, train
from .utils import ROOT

__version__ = "0.1.0"
