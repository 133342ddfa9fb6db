"""Causal effects of concept and input interventions on small image classifiers.

The main entry points are re-exported here; see the submodules for details.
"""

__version__ = "0.1.0"

from .attacks import AdversarialBatch, AttackConfig, bim, fgsm, jsma, pgd, run_attack
from .causal import (PWM, Z0, AttackCondition, CEConfig, CEReport, Concept, Condition, Do, Idle,
                     InterventionVariable, PixelRegion, apply_intervention, attack_ce_sweep, causal_effect,
                     ce_report, discretize_concept, expected_causal_effect, pixel_mask)
from .cem import Heatmap, compute_cam, compute_cem, render_heatmap
from .concept_ae import (AETrainConfig, AugmentedNetwork, ConceptAutoencoder, bottleneck_activations,
                         build_autoencoder, composite_loss, train_autoencoder)
from .data import Dataset, load_idx, synthetic_dataset
from .errors import CausalProbeError, ConfigError, ContractError, FormatError
from .nets import Network, NetworkSpec, TrainConfig, build_network, evaluate, train_classifier
from .tensor import Tensor, backward, finite_diff_check, no_grad

__all__ = [
    "AETrainConfig", "AdversarialBatch", "AttackCondition", "AttackConfig", "AugmentedNetwork", "CEConfig",
    "CEReport", "CausalProbeError", "Concept", "ConceptAutoencoder", "Condition", "ConfigError",
    "ContractError", "Dataset", "Do", "FormatError", "Heatmap", "Idle", "InterventionVariable", "Network",
    "NetworkSpec", "PWM", "PixelRegion", "Tensor", "TrainConfig", "Z0", "apply_intervention",
    "attack_ce_sweep", "backward", "bim", "bottleneck_activations", "build_autoencoder", "build_network",
    "causal_effect", "ce_report", "composite_loss", "compute_cam", "compute_cem", "discretize_concept",
    "evaluate", "expected_causal_effect", "fgsm", "finite_diff_check", "jsma", "load_idx", "no_grad", "pgd",
    "pixel_mask", "render_heatmap", "run_attack", "synthetic_dataset", "train_autoencoder",
    "train_classifier",
]
