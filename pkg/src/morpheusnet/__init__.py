"""Compact sleep-stage classification pipeline.

Subpackages cover the numeric kernels, the architecture search, the fixed
classifier and its two-phase training, int8 quantization, EDF ingestion,
the flat-model runtime, and the command-line front end.
"""

__version__ = "0.1.0"
