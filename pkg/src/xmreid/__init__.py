"""Cross-modality (visible/infrared) retrieval: synthetic corpus,
two-stream model with part- and graph-level attention, training schedule
and CMC/mAP evaluation."""

from .backbone import BackboneConfig, FeatureEmbed, TwoStreamBackbone
from .config import ExperimentConfig, load_experiment_config
from .datagen import (DatasetManifest, GeneratorConfig, IdentitySpec, SampleRecord,
                      generate_dataset, load_image, load_manifest, save_manifest,
                      split_train_test)
from .evaluation import EvalReport, cmc, distance_matrix, evaluate, extract_features, \
    mean_average_precision
from .graph_attention import CrossModalityGraphBranch, build_graph, graph_loss
from .losses import (LossReport, dynamic_weight, hard_triplet_loss, identity_loss,
                     part_loss, total_loss)
from .model import CrossModalNet, build_model
from .part_attention import WeightedPartAttention, extract_parts
from .sampling import BatchIndices, epoch_batches, sample_identity_balanced
from .trainer import Trainer, fit, lr_at

__version__ = "0.1.0"
