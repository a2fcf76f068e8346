"""Error Broadcast and Decorrelation (EBD) training engine.

Dense/conv/locally-connected networks trained by broadcasting output errors
through adaptive error-activation cross-correlation matrices, plus BP/DFA
baselines, anti-collapse regularizers, CorInfoMax-EBD recurrent networks and
a diagnostics suite (streaming correlations, alignment cosines, finite
differences, discrete MMSE oracle).
"""

__version__ = "0.1.0"
