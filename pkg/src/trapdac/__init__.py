"""Desk-scale simulator of a serial-DAC ion trap control stack.

Subpackages are imported explicitly (trapdac.serialbus, trapdac.trapfield,
...); the top level stays light so short-lived tools do not pay for the
compiled-kernel import chain.
"""

__version__ = "0.1.0"
