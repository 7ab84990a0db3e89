"""Spoken language identification on spectrogram images.

Pipeline: WAV ingest -> 10 kHz mono -> 10 s segments -> 129x500 grayscale
spectrogram PNGs -> convolutional recurrent classifier trained with a
small built-in autodiff engine.
"""

from .audio_io import AudioClip, decode_wav, encode_wav, resample, segment
from .augment import NoiseSpec, add_crackle, add_white_noise, mix_background
from .autodiff import Parameter, Tape, Tensor
from .crnn import CrnnConfig, CrnnModel, build_cnn_baseline, build_crnn, extend_head
from .dataset import (
    ManifestEntry,
    SyntheticLanguageSpec,
    batch_iter,
    prepare_spectrograms,
    split_manifest,
    synth_corpus,
)
from .spectrogram import Spectrogram, SpectrogramConfig, hann_window, read_png, stft, write_png
from .train_eval import EvalReport, TrainConfig, evaluate, fine_tune, noise_sweep, train

__version__ = "0.1.0"
