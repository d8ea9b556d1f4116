"""In-context geotechnical inference: classification, imputation and attribution."""

__version__ = "0.1.0"
