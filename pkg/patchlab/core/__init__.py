"""
Numerical kernels: data generation, the network, training objectives,
decomposition, CutMix theory and evaluation.
"""
