"""
Measuring attention collapse with the rank-1 diversity distance
===============================================================

A row-stochastic attention map that every query row agrees on is rank one:
all slots look at the same keys.  The diversity metric is the composite-norm
distance from a map to its best rank-1 approximation; zero means collapsed,
larger means the rows disagree (specialize).
"""

import numpy as np

from tadlab.analysis import composite_norm, diversity, layer_diversity_profile, rank1_fit
from tadlab.model import DetectionTransformer, ModelConfig

# Collapsed map: identical rows -> diversity 0.
uniform = np.full((4, 6), 1.0 / 6.0)
print(f"uniform (rank-1) map:      d = {diversity(uniform):.6f}")

# Identity: every query attends a different key -> maximally row-diverse.
print(f"4x4 identity map:          d = {diversity(np.eye(4)):.6f}")

# Something in between.
mixed = np.array([[0.7, 0.2, 0.1],
                  [0.1, 0.8, 0.1],
                  [0.3, 0.3, 0.4]])
vector = rank1_fit(mixed)
print(f"mixed map:                 d = {diversity(mixed):.6f}, "
      f"best rank-1 row = {np.round(vector, 3).tolist()}")
print(f"  residual check: ||A - 1a^T|| = {composite_norm(mixed - vector[None, :]):.6f}")

# The same metric applied inside a model: capture every attention map from a
# forward pass and average per capture point.  Untrained weights give a
# baseline; training moves these numbers (see the benchmark demo).
cfg = ModelConfig(num_classes=4, feature_dim=16, hidden_dim=32, num_queries=8,
                  encoder_layers=2, decoder_layers=2, heads=4, ffn_dim=64)
model = DetectionTransformer(cfg, np.random.default_rng(5))
features = [np.random.default_rng(i).normal(size=(40, 16)) for i in range(3)]
profile = layer_diversity_profile(model, features)
print("\nper-layer mean diversity of an untrained model (3 random sequences):")
for (kind, layer), value in sorted(profile.means.items()):
    print(f"  {kind:13s} layer {layer}: {value:.4f}")
