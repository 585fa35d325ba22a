"""Deep-feature layer selection and compressed-video restoration with a feature-based critic."""

__version__ = "0.1.0"
