"""Desk-scale document recognition workbench: synthetic manuscript corpora,
double-page splitting, layout self-training and CRNN+CTC line recognition."""

__version__ = "0.1.0"
