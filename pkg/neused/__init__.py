__all__ = [
    "config",
    "errors",
    "logging_utils",
    "diffusion",
    "denoisers",
    "fields",
    "scenes",
    "cameras",
    "rendering",
    "distillation",
    "training",
    "dataset",
    "images",
    "mesh",
    "checkpoint",
    "manifest",
    "cli",
]
