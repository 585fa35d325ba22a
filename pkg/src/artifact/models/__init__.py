"""Generator, critic and checkpoint containers."""

from .checkpoint import export_generator, load_checkpoint, load_generator, save_checkpoint
from .critic import CriticNetwork, CriticVariant, build_critic, critic_forward, critic_scalar
from .generator import GeneratorConfig, GeneratorNetwork, build_generator, generator_forward

__all__ = [
    "CriticNetwork",
    "CriticVariant",
    "GeneratorConfig",
    "GeneratorNetwork",
    "build_critic",
    "build_generator",
    "critic_forward",
    "critic_scalar",
    "export_generator",
    "generator_forward",
    "load_checkpoint",
    "load_generator",
    "save_checkpoint",
]
