"""CPU-scale neural SDF surface reconstruction with mask-guided consistency."""

__version__ = "0.1.0"
