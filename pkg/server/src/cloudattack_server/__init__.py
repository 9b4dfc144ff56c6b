"""Reference target-model service for query-based attack evaluation.

Wraps a CNN image classifier behind the shared wire protocol (GET /health,
GET /labels, POST /classify) so attacks can treat a real network as an
opaque probability oracle.
"""

__version__ = "0.1.0"
