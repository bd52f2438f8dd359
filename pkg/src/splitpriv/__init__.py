"""Privacy evaluation harness for split (edge/cloud) DNN inference.

Cut a model into edge and cloud halves, perturb the transmitted activation
with additive noise, estimate input/activation mutual information, attack the
defended edge with a trainable head, and score the outcome with Private
Accuracy (PA) and Privacy Index (PI).
"""
from .attack import (AttackerHead, JointModel, build_head, build_joint, joint_forward, random_baseline,
                     train_attack, train_best_baseline)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, TaskSpec, generate_synthetic, load_idx, split_train_val, write_idx
from .defense import (CalibrationResult, Defense, DefenseConfig, NoiseBank, apply_defense, calibrate_gaussian,
                      train_noise_bank)
from .metrics import PrivacyReport, build_report, compute_pa, compute_pi
from .mi import MIEstimate, PairSet, estimate_mi, mi_reduction, prepare_pairs
from .modelgraph import (LayerProfile, LayerSpec, ModelGraph, ParamStore, TensorSpec, build_model, forward,
                         loss_and_grads, profile)
from .splitter import CutPoint, SplitModel, edge_ratio, enumerate_cutpoints, split
from .trainer import TrainConfig, TrainReport, evaluate, label_smoothed_ce, sgd_step, train

__version__ = "0.1.0"
