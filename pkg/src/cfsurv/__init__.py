"""Counterfactual survival analysis under time-varying treatments.

Learns per-individual survival curves for hypothetical treatment sequences
from longitudinal right-censored data, combining a recurrent history encoder,
an MMD-balanced representation, stabilized sequential inverse-probability
weights and a discrete-time hazard head, with a built-in simulator that has a
closed-form truth oracle.
"""

__version__ = "0.1.0"
