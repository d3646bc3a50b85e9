"""Neural-codec text-to-speech: codec tokens, a cross-attention LM and a vocoder."""
from .audio_io import FRAME_RATE, HOP, SAMPLE_RATE, MelSpectrogram, Waveform, load_wav, mel_spectrogram, save_wav
from .codec import EOS, PAD, SOS, NeuralCodec, rvq_quantize
from .exceptions import CheckpointError, CodecTTSError, DataError, OverLengthError, TrainingDivergedError
from .lm import CodecLanguageModel, LmConfig, count_parameters
from .losses import TrainConfig, loss_ce, loss_gan_generator, loss_mel, loss_total, lr_at
from .pipeline import ModelBundle, compute_rtf, corpus_stats, length_probe, read_manifest, synthesize
from .speaker import SpeakerEncoder
from .text import BpeTokenizer, TextEncoder
from .vocoder import Vocoder

__version__ = "0.1.0"

__all__ = [
    "FRAME_RATE", "HOP", "SAMPLE_RATE", "MelSpectrogram", "Waveform", "load_wav", "mel_spectrogram", "save_wav",
    "EOS", "PAD", "SOS", "NeuralCodec", "rvq_quantize",
    "CheckpointError", "CodecTTSError", "DataError", "OverLengthError", "TrainingDivergedError",
    "CodecLanguageModel", "LmConfig", "count_parameters",
    "TrainConfig", "loss_ce", "loss_gan_generator", "loss_mel", "loss_total", "lr_at",
    "ModelBundle", "compute_rtf", "corpus_stats", "length_probe", "read_manifest", "synthesize",
    "SpeakerEncoder", "BpeTokenizer", "TextEncoder", "Vocoder",
]
