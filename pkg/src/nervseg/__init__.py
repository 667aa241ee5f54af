"""Multi-modal U-Net segmentation with cross-modal transformer fusion."""

from .models import ARCHITECTURES, Architecture, ModelConfig, build_model, parameter_count

__all__ = ["ARCHITECTURES", "Architecture", "ModelConfig", "build_model", "parameter_count"]
__version__ = "0.1.0"
