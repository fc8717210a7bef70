"""Joint visual-textual order embeddings for cross-modal retrieval."""

__version__ = "0.1.0"
