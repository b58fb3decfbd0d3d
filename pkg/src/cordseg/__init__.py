"""Gray matter / white matter segmentation toolkit for axial spinal cord slices.

Submodules:
    tensor    reverse-mode autodiff over dense float64 arrays
    mdgru     multi-dimensional GRU segmentation network
    losses    cross-entropy, Dice and generalized Dice losses
    augment   deformation / similarity / mirror training augmentation
    pipeline  slice I/O, resampling, cropping, filtering, manifests
    train     Adadelta training loop, inference, checkpoints
    metrics   overlap and surface-distance evaluation, majority voting
    phantom   synthetic multi-channel cord phantoms with ground truth
    cli       command-line entry point
"""

__version__ = "0.1.0"
