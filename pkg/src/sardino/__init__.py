"""sardino: a desk-scale DINO self-distillation lab for SAR-like raster tiles.

Subsystems:
  tensor     autodiff tensors with hand-derived backward passes
  params     parameter store, Adam, binary checkpoints
  gradcheck  finite-difference verification harness
  vit        vision transformer backbone + projection head
  tiles      tile container, channel composition, splits, synthetic regions
  dino       self-distillation pre-training loop
  finetune   linear vegetation decoder on attention features
  embeddings / swd / tsne / analysis / report   embedding-space analytics
  config / cli   declarative run configuration and the command-line pipeline
"""

__version__ = "0.1.0"
