"""Deployment planning and workload-balanced dispatch for joint LoRA fine-tuning over heterogeneous replicas."""

__version__ = "0.1.0"
