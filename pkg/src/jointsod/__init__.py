"""Joint salient / camouflaged object detection with uncertainty-aware adversarial training."""

__version__ = "0.1.0"
