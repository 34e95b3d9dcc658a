"""Temporal action detection lab: synthetic long-form pre-training on numpy.

Submodules (import what you need; nothing heavy loads from here):
  featbank   trimmed-clip feature bank generation and storage
  synthesis  long sequence synthesis from bank clips
  pretext    condition encoding, sampling, and query conditioning
  autodiff   reverse-mode tensor core
  model      encoder-decoder detection transformer
  matching   Hungarian assignment and the set-prediction loss
  trainer    pre-train / fine-tune loops, AdamW, schedules
  evalkit    tIoU, AP, mAP grids, sensitivity tables
  analysis   attention diversity metrics
  benchmark  category-split transfer experiment
  datasets   on-disk sample containers
  cli        command-line pipeline
"""

__version__ = "0.1.0"
