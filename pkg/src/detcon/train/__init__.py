"""Pretraining harness: LARS, schedules, run files, checkpoints, synthetic scenes, evaluation."""
