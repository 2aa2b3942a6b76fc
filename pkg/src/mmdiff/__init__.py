"""Multimodal-conditioned diffusion on synthetic color/shape scenes.

Small enough to train on a laptop CPU, complete enough to exercise the whole
pipeline: a frozen causal embedder with plug-in components, an
epsilon-predicting U-Net, classifier-free guidance, two samplers, and task
wrappers for text-to-image, variation, composition, and style transfer.
"""

__version__ = "0.1.0"
