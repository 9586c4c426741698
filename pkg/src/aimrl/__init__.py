"""Offline constrained RL with mixed policies whose active set stays affinely independent.

Modules: ``cmdp`` (model, evaluation, feasibility), ``envs`` (environments and
offline datasets), ``geometry`` and ``aim`` (mixed-policy bookkeeping),
``learner`` (primal-dual training), ``ope`` (importance-sampling evaluation),
``store`` (persistence) and ``cli`` (experiment harness).
"""
__version__ = "0.1.0"
