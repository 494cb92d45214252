"""Latent-token protein backbone diffusion at desk scale.

Modules: geometry (SE(3) frames), diffusion (schedules, IGSO3), tokenizer
(invariant features + k-means codebook), decoder (frame assembly), dit
(latent diffusion transformer), ipa (point attention + token cache), sampler
(reverse diffusion), pipeline/bench/verify/cli (orchestration and tooling).
"""

__version__ = "0.1.0"
