"""Radiology report generation from chest X-ray images.

A state-space vision encoder adapted with slice-targeted low-rank updates
feeds a small decoder-only language model through gated cross-attention.
The package covers the full loop: synthetic corpus generation, training,
greedy report decoding, and text plus clinical-efficacy evaluation.
"""

__version__ = "0.1.0"

__all__ = ["ReportGenerator", "__version__"]


def __getattr__(name):
    # lazy: importing the estimator pulls in numpy, which the CLI must
    # delay until thread environment variables are applied
    if name == "ReportGenerator":
        from .estimator import ReportGenerator

        return ReportGenerator
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
