"""Unit tests for prompt_decoupler."""
