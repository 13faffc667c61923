"""Self-supervised speech pretraining with joint contrastive and masked prediction."""
