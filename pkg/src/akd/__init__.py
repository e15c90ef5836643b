"""Skeleton-driven motion synthesis for Gaussian-splat assets.

Subpackages:
  transforms  rotation/rigid-transform math with hand-written adjoints
  skeleton    articulation trees, motion clips, forward kinematics
  skinning    heat-diffusion weight solve on the guide mesh
  splat       Gaussian cloud, deformation, differentiable rasterizer
  guidance    noise schedule, score-distillation gradients, wire client
  simulate    maximal-coordinate rigid-body simulator with adjoint rollout
  optimize    Adam, distillation and tracking drivers
"""

__version__ = "0.1.0"
