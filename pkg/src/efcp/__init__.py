"""Error-feedback compressed preconditioning (M-FAC, GGT) on a NumPy/Numba backend."""
from .compressors import (
    ErrorFeedback,
    IdentityCompressor,
    LowRankCompressed,
    PowerCompressor,
    SparseCompressed,
    TopKCompressor,
    block_quotas,
    densify,
    ef_step,
    power_compress,
    topk_block,
)
from .errors import ConfigError, DivergenceError, EfcpError, NumericalBreakdown, ShapeError
from .ggt import GGT, ggt_precondition, ggt_update
from .linalg import orthogonalize, sym_eig
from .lowrank import LowRankMFAC, lr_inner_product, lrmfac_step
from .mfac import MFAC, mfac_precondition, mfac_update
from .optim import RunConfig, StepRecord, efcp_step, run
from .tasks import LogisticTask, MlpTask, QuadraticTask, load_csv, make_synthetic
from .window import DenseGradWindow, SparseGradWindow

__version__ = "0.1.0"
