"""bitfcn: low bit-width fully convolutional segmentation engine.

Unsigned activation/weight codes are stored as packed bit planes; an
m-bit x n-bit convolution runs as m*n binary popcount kernels whose
integer accumulator dequantizes exactly to the real-valued convolution.
Training is quantization-aware (straight-through estimator) with
coarse-to-fine stage-wise losses and a stepwise bit-width decay schedule.
"""

__version__ = "0.1.0"

from .bitpack import BitPlane, BitPlaneTensor, bit_dot_signed, bit_dot_unsigned, pack, plane_popcount, unpack
from .bitconv import ConvGeom, bitconv2d, conv2d_reference, dequantize_conv, kernel_count
from .quantize import QuantSpec, quantize_activations, quantize_unit, quantize_weights, ste_grad
from .graph import SegNet, build_toy_bfcn, forward, predict, stagewise_loss
from .trainer import DecaySchedule, TrainConfig, class_weights, decay_sequence, optimal_allocation
from .dataset import ConfusionMatrix, SegSample, generate_toy_scene, mean_iou

__all__ = [
    "BitPlane", "BitPlaneTensor", "bit_dot_signed", "bit_dot_unsigned", "pack",
    "plane_popcount", "unpack", "ConvGeom", "bitconv2d", "conv2d_reference",
    "dequantize_conv", "kernel_count", "QuantSpec", "quantize_activations",
    "quantize_unit", "quantize_weights", "ste_grad", "SegNet", "build_toy_bfcn",
    "forward", "predict", "stagewise_loss", "DecaySchedule", "TrainConfig",
    "class_weights", "decay_sequence", "optimal_allocation", "ConfusionMatrix",
    "SegSample", "generate_toy_scene", "mean_iou",
]
