"""Semi-supervised volumetric segmentation with cross-pseudo supervised
sibling networks: fingerprint, plan, preprocess, train, infer, evaluate."""

__version__ = "0.1.0"
