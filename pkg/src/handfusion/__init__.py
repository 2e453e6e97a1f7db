"""Hand-region conditioned diffusion at desk scale.

Subpackage map:
  mesh        -- MANO-style hand mesh, keypoint regression, graph building
  diffusion   -- noise schedule, latent codec, denoising UNet + control branch
  conditioner -- multimodal hand-region encoder / fusion-feature producer
  fusion      -- position-preserving zero padding and additive injection
  training    -- losses, joint training loop, checkpointing
  sampling    -- ancestral reverse-diffusion inference
  data        -- sample schema, curation pipeline, annotator adapters
  synth       -- procedural ground-truth scene generator
  metrics     -- FID / KID over whole images and hand crops
  cli         -- `handfusion` command line entry point
"""

__version__ = "0.1.0"
