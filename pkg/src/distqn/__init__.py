"""Distributed quasi-Newton estimation with SR1 and BFGS inverse-Hessian updating."""

__version__ = "0.1.0"

from .dqn import (
    DqnConfig,
    StageTrace,
    centralized_reference,
    run_distributed_newton,
    run_dqn,
    run_dqn_bfgs,
    run_dqn_sr1,
)
from .models import DataShard, Dataset, ModelKind, gen_example1, gen_example2, gen_screening_dataset
from .quasinewton import bfgs_update, local_qn_solve, newton_solve, sr1_update

__all__ = [
    "DataShard",
    "Dataset",
    "DqnConfig",
    "ModelKind",
    "StageTrace",
    "bfgs_update",
    "centralized_reference",
    "gen_example1",
    "gen_example2",
    "gen_screening_dataset",
    "local_qn_solve",
    "newton_solve",
    "run_distributed_newton",
    "run_dqn",
    "run_dqn_bfgs",
    "run_dqn_sr1",
    "sr1_update",
]
