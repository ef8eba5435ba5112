"""Cooperative 3D UAV target positioning tool kit.

One active UAV illuminates a moving target; four passive UAVs with
switchable-port linear fluid antennas measure bistatic range sums and
relay them to a ground station, which solves for the target position.
The package bundles the simulator (kinematics, channels, localization),
a closed-form error analysis with Monte Carlo oracles, hand-rolled
differentiable network blocks, and the factorized multi-agent Q-learning
trainer plus its baselines.
"""

__version__ = "0.1.0"
