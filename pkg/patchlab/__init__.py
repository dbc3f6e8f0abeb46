"""
patchlab - numerical lab for patch-level augmentation dynamics.

Trains a two-layer patch CNN on the feature-noise patch distribution with exact
ERM, Cutout and CutMix full-batch gradient descent and checks the predicted
feature-learning behavior of each method.
"""

__version__ = "1.0.0"
