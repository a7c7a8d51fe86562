"""
w2vj: self-supervised speech pretraining with FBANK or waveform frontends.

Pretrains a wav2vec-2.0-style model (convolutional frontend, Transformer or
Conformer context encoder, Gumbel product quantizer) with a contrastive
objective, fine-tunes it with CTC, and scores greedy transcripts by CER/WER.
"""

__version__ = "0.1.0"
__author__ = "w2vj contributors"

from .cli import app, dispatch

__all__ = ["app", "dispatch"]
