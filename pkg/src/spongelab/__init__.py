"""Desk-scale laboratory for sponge (energy-latency) attacks on small nets."""

from .data import Dataset, load_csv, load_idx, subset, synth_blobs
from .defenses import (DefenseOutcome, clip_biases_positive, clip_weights,
                       fine_prune_biases, finetune_l2, noise_biases_negative,
                       noise_weights)
from .energy import (CostConstants, EnergyReport, count_average_case,
                     count_worst_case, energy_ratio, mean_energy_ratio,
                     ratio_increase)
from .graph import (LayerSpec, ModelGraph, TargetLayerSet, build_model,
                    identify_sparsity_layers, identify_target_layers,
                    load_model, save_model)
from .metrics import accuracy, classification_accuracy, mean_ssim, ssim
from .poison import (PoisonConfig, TrainConfig, l0_hat, poison_objective,
                     sponge_energy, train_poisoned)
from .profiler import (ActivationProfile, BiasStats, fired_neuron_fractions,
                       mean_bias_values, profile)
from .skipsponge import (AttackConfig, AttackTrace, evaluate_performance,
                         run_skipsponge)
from .tensor import (Gradient, Tensor, backward, batchnorm_infer,
                     conv2d_forward, dense_forward, leaky_relu_forward,
                     mse_loss, pool_forward, relu_forward,
                     softmax_cross_entropy, tanh_forward)

__version__ = "0.1.0"
