"""Hand-aware controllable image generation on a small numpy diffusion stack.

Modules:
    tensor: reverse-mode autodiff on float64 arrays and the tensor container.
    backbone: noise schedule, toy text encoder, UNet denoiser and sampler.
    control: condition encoder, trainable control branch, zero-conv injection.
    fusion: multi-resolution self-attention pooling and feature refinement.
    enhance: hand-token tagging and biased cross-attention.
    semantics: caption, extract and compose prompts through chat endpoints.
    metrics: FID, KID, hand crops, detection confidence, keypoint error.
    harness: configuration, synthetic data, training and the ``sesa`` CLI.
"""

__version__ = "0.1.0"
