"""MaskRDT: retentive sequence model with adaptive causal masking for
offline recommendation, plus the synthetic simulator it trains against."""

__version__ = "0.1.0"
