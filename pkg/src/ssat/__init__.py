"""Adversarial attacks and adversarial training with a semantic latent space for vehicle trajectory prediction."""
from .attack import AttackConfig, AttackResult, AttackType, attack_objective, pgd_attack, project_perturbation
from .metrics import ade, directional_error, error_report, intention_error_rate
from .predictor import (ModelConfig, PredictorModel, PriorSpec, collate, gradient_check, load_checkpoint,
                        save_checkpoint)
from .scenario import Scene, generate_dataset, generate_synthetic_scene, ingest_scenes, semantic_labels
from .training import TrainConfig, adversarial_training_step, train

__version__ = "0.1.0"
