"""
Noisy-label training with a doubly transitional loss: an explicit transition
matrix estimated by EM and an implicit flow from true-label to noisy-label logits.
"""

__version__ = "1.0.0"
