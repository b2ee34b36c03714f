"""
Test suite for pixtok.

Unit tests cover the autodiff core, tokenizers, models, optimizer, data
pipeline, checkpoints and attention analysis; integration tests train tiny
models end to end through the harness and the CLI.
"""
