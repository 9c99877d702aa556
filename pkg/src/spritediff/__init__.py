"""spritediff: multi-round feedback-driven sprite diffusion.

A desk-scale text(attribute)-to-image pipeline: a toy latent diffusion
model over a deterministic 16x16 sprite world, LoRA adapters on its
cross-attention projections, a scheduled multi-term reward objective
(diversity / consistency / learned preference), a multi-round dialogue
engine with a simulated user, and an HTTP session service for
human-in-the-loop refinement.
"""

__version__ = "0.1.0"
