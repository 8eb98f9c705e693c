"""Person-specific low-rank adaptation and chunked inference for
speech-driven vertex animation models, on a seeded synthetic corpus."""

__version__ = "0.1.0"
