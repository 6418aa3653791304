"""Stereo self-supervised depth estimation and pseudo-LiDAR generation.

Desk-scale pipeline: photometric/smoothness loss kernels with analytic
disparity gradients, direct coarse-to-fine disparity optimization, a
shape- and parameter-exact model of a 6-channel stereo encoder-decoder
with loadable-weight inference, depth back-projection to point clouds,
flip-fusion post-processing, KITTI-style evaluation metrics, and a
resolution-vs-throughput benchmark harness.
"""

from pseudolidar.raster import ImageBuffer, bilinear_sample, hflip, resize_bilinear, spatial_gradient
from pseudolidar.geometry import (
    DepthMap,
    DisparityMap,
    Intrinsics,
    PointCloud,
    RigidTransform,
    StereoRig,
    back_project,
    disparity_to_depth,
    project,
    warp_rectified,
    warp_to_target,
)
from pseudolidar.losses import (
    LossBreakdown,
    LossConfig,
    auto_mask,
    loss_gradient,
    reconstruction_error,
    reprojection_loss,
    smoothness_loss,
    ssim,
    total_loss,
)
from pseudolidar.network import (
    ArchSpec,
    LayerSpec,
    WeightStore,
    build_encoder,
    build_network,
    forward,
    layer_census,
    param_count,
    propagate_shapes,
    sigmoid_to_disparity,
)
from pseudolidar.optimize import OptimizerConfig, OptimizationTrace, Scene, check_gradients, optimize_disparity
from pseudolidar.evaluate import EvalConfig, EvalReport, apply_scaling, compute_metrics, post_process_fuse

__version__ = "0.1.0"
