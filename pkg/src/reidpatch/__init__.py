"""Single-pass adversarial patch generation against re-identification embedders."""

from .composer import PlacementMask, TransformSpec, compose, make_mask, transform_patch
from .data import DatasetIndex, PersonRecord, load_image, sample_pair, scan_dataset
from .embedders import EmbedderHandle, Embedding, FeaturePyramid, embed, features_multiscale, register_embedder
from .evalkit import (
    AttackConfig,
    EvalReport,
    RetrievalProtocol,
    attack_success_rate,
    average_precision,
    evaluate_retrieval,
    patch_size_sweep,
)
from .explain import ActivationMap, ProjectionResult, activation_map, pca_project
from .naturalizer import (
    decode_latent,
    gan_discriminator_loss,
    gan_generator_loss,
    latent_regularizer,
    perturb_latent,
)
from .objectives import LossWeights, pull_loss, push_loss_targeted, push_loss_untargeted, total_loss
from .patchgen import FeatureFusion, PatchAttacker, PatchGenerator, UpBlock, generate_patch

__version__ = "0.1.0"
