"""Safe model predictive control for urban driving.

Subpackages cover polytope geometry, vehicle models, reference paths,
pedestrian reachable-set prediction, collision constraints, terminal-set
synthesis, a dense QP solver, the SQP real-time-iteration controller,
and a deterministic closed-loop simulator.
"""

__version__ = "0.1.0"
