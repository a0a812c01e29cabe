"""Learnable class-distribution proxies, anchors and priors for semi-supervised
segmentation, with a from-scratch autodiff engine and a desk-scale harness."""

__version__ = "0.1.0"
