"""Model serving and fixture generation for the vigtext detector."""

from .backends import DeterministicBackend
from .fixtures import FixtureGenResult, fixture_gen
from .service import ModelService, make_server

__all__ = [
    "DeterministicBackend",
    "FixtureGenResult",
    "fixture_gen",
    "ModelService",
    "make_server",
]
