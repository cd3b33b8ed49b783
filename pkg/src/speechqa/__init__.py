"""Non-intrusive speech quality estimation toolkit.

Synthesizes degraded-speech datasets, extracts constant-Q, Mel-context and
i-vector features, trains neural MOS estimators from scratch, and evaluates
them with Pearson correlation and MSE.
"""

__version__ = "0.1.0"

SAMPLE_RATE = 16000
