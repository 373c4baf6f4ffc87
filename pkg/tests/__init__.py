"""Tests for prompt_decoupler."""
