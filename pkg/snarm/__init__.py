"""
SNARM anomaly detection
Hybrid residual matching, self-navigated state-space scanning and a
multi-view decoder for industrial anomaly localization
"""

__version__ = "0.1.0"
