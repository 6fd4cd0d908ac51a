"""chainrec: recovering multi-hop reasoning chains from question-answer supervision."""

__version__ = "0.1.0"
