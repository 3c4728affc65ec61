"""Kernel collocation for convection-diffusion on evolving surfaces."""
from .exprdsl import Expr, eval_jet2, evaluate, parse
from .kernels import KernelSpec
from .operators import OperatorForm
from .stepper import Algorithm, ProblemSpec, Solver, march

__all__ = ["Algorithm", "Expr", "KernelSpec", "OperatorForm", "ProblemSpec", "Solver",
           "eval_jet2", "evaluate", "march", "parse"]
