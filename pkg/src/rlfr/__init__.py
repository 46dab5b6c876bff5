"""Reinforcement learning with flow rewards (RLFR) at desk scale.

A conditional flow-matching field is fit over policy latents; per-token
velocity deviations inside that field are converted into shaped rewards
that extend GRPO's outcome-level advantages. The package ships a synthetic
modular-arithmetic environment with an exact verifier so every part of the
pipeline is testable end to end.
"""

__version__ = "0.1.0"
