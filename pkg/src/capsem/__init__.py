"""Capsule layers with EM routing by agreement, on a small numpy autodiff tape.

The pieces, bottom up:

  tensor      dense arrays, broadcasting, two-operand contraction,
              reductions, reverse-mode differentiation on a tape
  routing     the routing loop (votes, E-step, D-step, M-step) in fixed,
              variable-input, and variable-output sharing modes
  nn          linear / layer norm / mask log-odds / cross entropy / mixing
  optim       rectified Adam and the single-cycle (lr, beta1) schedule
  data        synthetic constellation task, capsule file container,
              embedding ingestion
  analysis    pose-trajectory metrics and routing-trace summaries
  classifier  the two-layer classifier and its training loop
  cli         the ``capsem`` command-line surface
"""

from .routing import (CapsuleBatch, LOGIT_MAX, RoutingConfig, RoutingOutput,
                      RoutingParams, RoutingTrace, compute_votes, d_step,
                      e_step, init_params, m_step, param_count, route,
                      route_reference)
# note: the tensor() constructor is NOT re-exported; `capsem.tensor` stays
# bound to the submodule
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "CapsuleBatch", "LOGIT_MAX", "RoutingConfig", "RoutingOutput",
    "RoutingParams", "RoutingTrace", "Tape", "Tensor", "backward",
    "compute_votes", "d_step", "e_step", "grad_check", "init_params",
    "m_step", "param_count", "route", "route_reference",
    "__version__",
]
