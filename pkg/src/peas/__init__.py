"""Perceptual exploration for transfer-based black-box attacks, at desk scale."""

from .attacks import AttackResult, AttackSpec, QueryOracle, attack_fgsm, attack_pgd, attack_simba, attack_timi
from .augment import SamplingFunction, perceptual_distance, sample
from .core import expected_transferability, peas_attack, peas_then_query, rank_candidates, select_candidate
from .data import DatasetProfile, SyntheticSpec, generate_synthetic_dataset, load_dataset
from .nn import LabeledSample, Network, cross_entropy_loss, forward, input_gradient, softmax, train_epoch
from .zoo import ModelZoo, RoleAssignment, build_architecture, enumerate_roles, load_zoo, save_zoo, train_zoo

__version__ = "0.1.0"
