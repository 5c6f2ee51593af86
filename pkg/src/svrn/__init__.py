"""Shallow-CNN + spatially variant gated RNN segmentation toolkit."""

from .config import RunConfig
from .data import (AugmentConfig, SampleRecord, SynthConfig, augment,
                   background_sampling_mask, boundary_sampling_mask,
                   generate_synthetic, load_dataset, save_dataset)
from .harness import (bench_network, bench_scan, evaluate, evaluate_two_stage,
                      infer_image)
from .layers import (ConvSpec, OptimState, conv2d_backward, conv2d_forward,
                     deconv2d, deconv2d_backward, maxpool2d, maxpool2d_backward,
                     sgd_step, sigmoid_bce, softmax_ce)
from .metrics import EvalReport, confusion_matrix, report_from_confusion
from .modelio import load_model, save_model
from .network import (LayerSpec, Network, NetworkSpec, build_stage1,
                      build_stage2)
from .parsing import (ComponentCrop, boundary_ground_truth, compose_two_stage,
                      crop_component, total_loss)
from .scan import (DIRECTIONS, Direction, ScanParams, integrate_max,
                   scan_backward_gated, scan_forward_gated, scan_forward_plain,
                   srnn_layer, srnn_layer_backward)
from .tensor_ops import (channel_concat, channel_split, matvec,
                         set_verification_mode, spectral_norm,
                         spectral_norm_project)
from .train import train
from .vocab import COARSE_CLASSES, FINE_CLASSES, IGNORE_LABEL

__version__ = "0.1.0"
