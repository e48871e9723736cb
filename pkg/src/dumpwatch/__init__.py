"""Waste-dump detection in multi-band rasters.

Pipeline stages live in submodules:

    geodata   raster/vector I/O and coordinate math
    dataset   band stacking, rasterization, chip extraction, synthetic scenes
    numerics  reverse-mode autodiff core (conv, pool, losses, Adam)
    unet      encoder-decoder segmentation model and checkpoints
    training  training loop, metrics, ablation harness
    detect    tiled inference and raster-to-vector post-processing
    cli       `dumpwatch` command line entry point
"""

__version__ = "0.1.0"
