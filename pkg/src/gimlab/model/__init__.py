"""Dual-branch encoder, decoder heads and the training loop."""
