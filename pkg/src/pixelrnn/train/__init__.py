"""Quantization-aware training of the encoders and their decoder."""
