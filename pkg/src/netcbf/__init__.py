"""Safety filtering for remotely controlled systems over a delayed network."""
from .barrier import BarrierFunction, BarrierSet, estimate_lipschitz
from .dynamics import InputBuffer, InputSet, SystemModel, predict, rollout, step
from .qp import QPProblem, SolveReport, Status, solve_qp

__version__ = "0.1.0"
