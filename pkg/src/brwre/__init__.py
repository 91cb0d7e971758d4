"""Critical branching random walks ("snakes") in random environments on Z^d."""

__version__ = "0.1.0"
