"""Single-view triplane reconstruction with self-training on unposed images."""
