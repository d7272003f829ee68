"""Co-synthesis of a neural barrier function, output-feedback controller and
state observer, with a Lipschitz-based validity check and closed-loop audit."""

__version__ = "0.1.0"
