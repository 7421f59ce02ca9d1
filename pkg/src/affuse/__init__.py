"""Context-aware multimodal affect recognition with additive transformer fusion."""
__version__ = "0.1.0"
