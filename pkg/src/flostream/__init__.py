"""Online video denoising with a forward recurrent module and a look-ahead module."""
from .core import ConfigError, DenoiserConfig, FlowField, NoiseSpec, VideoClip, validate_config
from .net import BiRNN, FloRNN, build_model
from .pipeline import StreamState, birnn_denoise, denoise_offline, denoise_stream, forwardrnn_denoise

__all__ = [
    "BiRNN",
    "ConfigError",
    "DenoiserConfig",
    "FloRNN",
    "FlowField",
    "NoiseSpec",
    "StreamState",
    "VideoClip",
    "birnn_denoise",
    "build_model",
    "denoise_offline",
    "denoise_stream",
    "forwardrnn_denoise",
    "validate_config",
]
