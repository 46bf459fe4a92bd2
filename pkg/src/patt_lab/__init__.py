"""Long-tailed out-of-distribution detection lab.

Hyperspherical feature training against a vMF mixture with implicit
contrastive augmentation and tail-weighted logit adjustment, post-hoc feature
calibration, and the evaluation/CLI tooling around them.
"""

__version__ = "0.1.0"
