"""Geometric phases of continuously monitored qubits under a rotating Gaussian measurement.

Modules
-------
bloch         states, Kraus operators and readout model
trajectories  sampled and record-driven trajectories, ensembles, post-selection
action        stochastic action, Hamilton equations, co-rotating equilibrium
optimal       most-likely self-closing paths and their transitions
topology      open geometric phases, Chern and winding numbers
corrections   Gaussian fluctuation corrections on the equator
cli           command-line driver
"""

__version__ = "0.1.0"
