"""mmgem: a desk-scale generative embedding model.

One decoder-only language model serves both as contrastive text encoder and
as caption decoder over spatial visual feature maps, with region-level
pooling for fine-grained retrieval and description.
"""

__version__ = "0.1.0"
