"""Region-proxy and class-attention-proxy ViT segmentation."""
