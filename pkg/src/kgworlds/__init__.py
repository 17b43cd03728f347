"""Build parallel real-mapped and synth-mapped worlds from a knowledge graph."""

__version__ = "0.1.0"
