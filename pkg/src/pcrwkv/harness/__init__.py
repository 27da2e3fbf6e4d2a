"""Training, evaluation, ablation and benchmark orchestration."""
