"""Context-aware residual scene flow estimation on point clouds, in numpy."""
from .network import NetworkConfig, SceneFlowNet
from .traindata import ScenePair, SceneRecipe, generate_scene, read_scene, write_scene

__version__ = "0.1.0"
