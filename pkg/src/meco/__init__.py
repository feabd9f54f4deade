"""Motion-example-controlled co-speech gesture generation, desk scale."""

__version__ = "0.1.0"
