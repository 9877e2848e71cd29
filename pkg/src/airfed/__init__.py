"""Deterministic baseband simulator for OFDM over-the-air gradient aggregation.

Subpackages cover the physical channel model (:mod:`airfed.channel`), frame
construction and detection (:mod:`airfed.framing`), OFDM and subcarrier
mapping (:mod:`airfed.ofdm`), CFO estimation (:mod:`airfed.sync`), the
two-stage pre-equalization protocol (:mod:`airfed.protocol`), the federated
learning task (:mod:`airfed.fl`), and experiment scenarios
(:mod:`airfed.experiments`).
"""

__version__ = "0.1.0"
