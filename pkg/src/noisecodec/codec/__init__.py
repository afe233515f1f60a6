"""Two-branch denoising compression network."""
