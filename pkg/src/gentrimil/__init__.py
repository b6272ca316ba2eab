"""Gentrification detection from time-lapsed street-view image pairs.

Step 1 trains a Siamese change detector on weakly labelled pairs; Step 2
pools the pair embeddings of a census tract with gated attention and
classifies the tract.
"""

from .encoder import EncoderParams, EmbeddingCache, Step1Config, embed_dataset, init_encoder, train_change_detector
from .geodata import GeoCoordinate, RoadNetwork, TractPolygon, assign_tract, haversine_distance, sample_road_points
from .ingest import Label, NeighborhoodContainer, PairLabel, StreetViewImage, TimedPair
from .mil import AttentionParams, MILConfig, init_attention, train_mil
from .synthcity import SynthConfig, gen_city

__version__ = "0.1.0"

__all__ = [
    "AttentionParams", "EmbeddingCache", "EncoderParams", "GeoCoordinate", "Label", "MILConfig",
    "NeighborhoodContainer", "PairLabel", "RoadNetwork", "Step1Config", "StreetViewImage",
    "SynthConfig", "TimedPair", "TractPolygon", "assign_tract", "embed_dataset", "gen_city",
    "haversine_distance", "init_attention", "init_encoder", "sample_road_points", "train_change_detector",
    "train_mil",
]
