"""Fine-grained grocery product class recognition toolkit.

Pipeline: discriminative patch mining over HOG grids, max-pooled
detector-score histograms with an optional 2x2 spatial pyramid,
one-vs-all SVM classification, packaging-word indexing for shopping
lists, and uncertainty-sampling active learning.
"""

__version__ = "0.1.0"
