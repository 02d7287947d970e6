"""Gradient attribution maps and faithfulness metrics (Deletion, Insertion, EvalAttAI)."""

from .attribution import (AttributionMap, MethodConfig, attribute, grad_times_image, gradcam, guided_backprop,
                          integrated_gradients, random_attribution, smoothgrad, vanilla_gradient)
from .config import ExperimentConfig, parse_config
from .container import load_model, load_tensor, save_model, save_tensor
from .data import LabeledDataset, NoiseSpec, add_gaussian_noise_snr, channel_means, load_dataset, synth_dataset
from .metrics import (DeletionConfig, EvalAttAIConfig, EvalCurve, auc, confidence_interval, deletion_curve,
                      evalattai_curve, insertion_curve, normalize_against_random, rank_pixels)
from .tensor_core import Model, TrainConfig, backward_input, forward, grad_check, predict_class, train

__version__ = "0.1.0"
