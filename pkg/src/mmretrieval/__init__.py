"""Image-to-multimodal retrieval with proxy classification and concept-aware fusion."""

__version__ = "0.1.0"
