"""Cloud-overlay black-box adversarial attack toolkit.

Optimizes a compact cloud parameter vector with differential evolution
against a classifier's probability outputs, overlaying procedurally
generated clouds that look like real atmospheric cover.
"""

__version__ = "0.1.0"
