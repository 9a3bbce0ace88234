"""Probabilistic transient stability prediction with support vector machines."""
from importlib import resources

__version__ = "0.1.0"


def load_ieee14():
    """The bundled IEEE 14-bus case with its classical machine data."""
    from .grid_model import parse_cdf

    data = resources.files(__package__) / "data"
    return parse_cdf((data / "ieee14.cdf").read_text(), (data / "ieee14.dyn").read_text())
