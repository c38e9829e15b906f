from .container import ContainerError, container_read, container_write
from .coco import CocoFormatError, load_coco
from .rng import Xoshiro256, derive_seed
from .synthetic import CLASS_NAMES, Instance, Scene, gen_scene, gen_video, has_adjacent_pair

__all__ = [
    "CLASS_NAMES", "CocoFormatError", "ContainerError", "Instance", "Scene", "Xoshiro256",
    "container_read", "container_write", "derive_seed", "gen_scene", "gen_video",
    "has_adjacent_pair", "load_coco",
]
