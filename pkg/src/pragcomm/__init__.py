"""Goal-oriented remote control: when should an encoder speak, and what should a decoder do?"""

__version__ = "0.1.0"

from .belief import DecoderPolicy, EncoderPolicy  # noqa: E402
from .evaluation import JointPolicy, brute_force_joint, evaluate_exact, simulate  # noqa: E402
from .jpo import solve_jpo  # noqa: E402
from .mdp import ControlledMarkovProcess, HorizonConfig, build_counterexample  # noqa: E402
from .pull import solve_mpi, solve_periodic  # noqa: E402
from .push import solve_api, standard_inits  # noqa: E402

__all__ = [
    "ControlledMarkovProcess",
    "DecoderPolicy",
    "EncoderPolicy",
    "HorizonConfig",
    "JointPolicy",
    "brute_force_joint",
    "build_counterexample",
    "evaluate_exact",
    "simulate",
    "solve_api",
    "solve_jpo",
    "solve_mpi",
    "solve_periodic",
    "standard_inits",
]
