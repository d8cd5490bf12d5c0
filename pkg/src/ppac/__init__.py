"""Personal-popularity aware counterfactual recommendation."""

from .data import InteractionDataset, build_dataset, intervened_split, load_dataset, sample_negatives
from .engine import InferenceConfig, TrainConfig, rank_baseline, rank_users, train
from .models import init_bundle
from .popularity import PopularityIndex, build_popularity, build_similar_user_index, compute_gp

__version__ = "0.1.0"
