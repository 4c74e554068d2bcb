"""Rich-user/rich-item recommendation toolkit.

Entity vocabularies with multi-graph side information feed learnable
graph-convolution embeddings; a sigmoid MLP scores (user, item) pairs;
ranking quality is measured and optimized with a budget-aware
partial-AUC/precision hybrid (pAp@k).
"""

__version__ = "0.1.0"
