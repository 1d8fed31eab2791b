"""Adapting frozen vision-transformer backbones to binary EM segmentation.

Head-only or LoRA training, dataset-level foreground IoU, and
embedding-space domain-shift diagnostics (PCA, Fréchet distance, linear
probes).
"""

__version__ = "0.1.0"
