"""Distractor-robust differentiable scene fitting with feature-conditioned
per-ray uncertainty, a product-form SSIM uncertainty loss, decoupled
optimization, and dilated patch sampling."""

__version__ = "0.1.0"
