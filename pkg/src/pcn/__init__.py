"""Prototypical clustering networks: few-shot classification with a mixture of
prototypes per class, its baselines, a synthetic long-tailed benchmark and the
evaluation protocol around them."""

from .baselines import CEHead, knn_classify, pn_config, posthoc_protos
from .datagen import Dataset, GenConfig, gen_synthetic, load_dataset, lowshot_folds, save_dataset, split_base_novel
from .episodic import Episode, EpisodeConfig, build_test_prototypes, episode_loss, sample_episode, train
from .estimators import CrossEntropyClassifier, PrototypicalClusteringClassifier
from .metrics import MetricsReport, aggregate_folds, balanced_recall_at_k, mca, recall_at_k
from .numerics import AdamState, EmbedNet, adam_step, net_forward, net_gradients, net_init
from .protobank import (
    PrototypeBank,
    class_posterior,
    ema_update,
    kmeans,
    linear_form,
    reinit_epoch,
    responsibilities,
    sq_dist,
)

__version__ = "0.1.0"
