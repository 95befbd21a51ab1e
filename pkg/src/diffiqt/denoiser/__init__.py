from .attention import TransformerBlock, attention_context, efficient_cross_batch_attention
from .layers import ResidualBlock, TimeEmbedding, channel_shuffle_down, channel_shuffle_up, sinusoidal_embedding
from .network import DeepFeatureExtraction, Denoiser, build_denoiser, count_parameters, parameter_class

__all__ = [
    "DeepFeatureExtraction",
    "Denoiser",
    "ResidualBlock",
    "TimeEmbedding",
    "TransformerBlock",
    "attention_context",
    "build_denoiser",
    "channel_shuffle_down",
    "channel_shuffle_up",
    "count_parameters",
    "efficient_cross_batch_attention",
    "parameter_class",
    "sinusoidal_embedding",
]
