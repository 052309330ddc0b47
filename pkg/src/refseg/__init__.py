"""Two-stage referring-expression segmentation on synthetic shape scenes.

Stage 1 fuses instruction tokens into a hierarchical visual encoder and
decodes a coarse mask; stage 2 refines the probability map with features
taken from a noise-prediction UNet run on the diffused input image.
"""

__version__ = "0.1.0"
