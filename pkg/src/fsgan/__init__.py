"""Few-shot data augmentation with bias-corrected GANs and multi-head fine-tuning."""

__version__ = "0.1.0"
