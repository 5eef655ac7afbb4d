"""upres: two-stage generative reconstruction orchestration for broadcast cutouts."""

__version__ = "0.1.0"
