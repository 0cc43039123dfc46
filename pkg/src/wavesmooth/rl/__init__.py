"""Desk-scale PPO training."""
