"""defectnet: a from-scratch kit for small-defect semantic segmentation on
class-imbalanced data.

Submodules:
    tensor    reverse-mode autodiff over dense float64 arrays
    ops       conv2d (dilated), pooling, leaky ReLU, upsampling, softmax
    losses    class weights, weighted CE, generalized dice, hybrid mix
    model     the two-path segmentation network and weight serialization
    patches   training-patch extraction, tiling, probability merging
    synth     synthetic imbalanced scene generator
    metrics   confusion-matrix evaluation
    trainer   Adam loop with checkpoints and loss history
    config    JSON run configuration with desk/paper profiles
    cli       the `dnet` command-line entry point
"""

__version__ = "0.1.0"
