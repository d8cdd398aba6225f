"""Service-time prediction for municipal 311 requests.

Spatiotemporal attention over daily region x type panels, attention across
request types, per-type Gaussian processes and text-derived workload scores,
combined by an MLP.
"""

__version__ = "0.1.0"
