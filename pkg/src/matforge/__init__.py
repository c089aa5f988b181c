"""PBR material maps (normal, roughness, metalness, height, specular) for
UV-mapped meshes that only carry a diffuse texture."""

from .errors import MatforgeError

__all__ = ["MatforgeError", "__version__"]
__version__ = "0.1.0"
